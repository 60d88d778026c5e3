use std::rc::Rc;

use crate::error::{shape_err, Result, TensorError};
use crate::tape::BackwardFn;
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out: Vec<f32> = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        let backward: BackwardFn = Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]);
        Tensor::record(out, self.shape(), &[self, other], backward)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out: Vec<f32> = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        let backward: BackwardFn =
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]);
        Tensor::record(out, self.shape(), &[self, other], backward)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out: Vec<f32> = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.data_rc().clone(), other.data_rc().clone());
        let backward: BackwardFn = Box::new(move |g| {
            let ga = g.iter().zip(b.iter()).map(|(g, b)| g * b).collect();
            let gb = g.iter().zip(a.iter()).map(|(g, a)| g * a).collect();
            vec![Some(ga), Some(gb)]
        });
        Tensor::record(out, self.shape(), &[self, other], backward)
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(terms: &[&Tensor]) -> Result<Tensor> {
        let first = terms.first().ok_or(TensorError::Empty("add_n"))?;
        let mut out = first.to_vec();
        for t in &terms[1..] {
            same_shape("add_n", first, t)?;
            for (o, v) in out.iter_mut().zip(t.data()) {
                *o += v;
            }
        }
        let n = terms.len();
        let backward: BackwardFn = Box::new(move |g| (0..n).map(|_| Some(g.to_vec())).collect());
        Tensor::record(out, first.shape(), terms, backward)
    }

    pub fn scale(&self, factor: f32) -> Result<Tensor> {
        let out = self.data().iter().map(|v| v * factor).collect();
        let backward: BackwardFn = Box::new(move |g| vec![Some(g.iter().map(|v| v * factor).collect())]);
        Tensor::record(out, self.shape(), &[self], backward)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let out = Rc::new(self.data().iter().map(|v| v.max(0.0)).collect::<Vec<f32>>());
        let saved = out.clone();
        let backward: BackwardFn = Box::new(move |g| {
            vec![Some(
                g.iter()
                    .zip(saved.iter())
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect(),
            )]
        });
        Tensor::record_rc(out, self.shape(), &[self], backward)
    }

    /// Sum of all elements as a scalar tensor. Accumulates in `f64`.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let n = self.len();
        let backward: BackwardFn = Box::new(move |g| vec![Some(vec![g[0]; n])]);
        Tensor::record(vec![s], &[], &[self], backward).expect("scalar shape is always valid")
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(TensorError::Empty("mean"));
        }
        self.sum().scale(1.0 / self.len() as f32)
    }

    /// `Σ_k weights[k] · inputs[k]` where `weights` is a 1-D tensor with one
    /// entry per input. Gradients flow to both the inputs and the weights.
    pub fn weighted_sum(inputs: &[&Tensor], weights: &Tensor) -> Result<Tensor> {
        let first = inputs.first().ok_or(TensorError::Empty("weighted_sum"))?;
        if weights.shape() != [inputs.len()] {
            return shape_err(
                "weighted_sum",
                format!("{} inputs but weights of shape {:?}", inputs.len(), weights.shape()),
            );
        }
        let w = weights.to_vec();
        let mut out = vec![0.0f32; first.len()];
        for (t, &wk) in inputs.iter().zip(&w) {
            same_shape("weighted_sum", first, t)?;
            for (o, v) in out.iter_mut().zip(t.data()) {
                *o += wk * v;
            }
        }
        let saved: Vec<Rc<Vec<f32>>> = inputs.iter().map(|t| t.data_rc().clone()).collect();
        let backward: BackwardFn = Box::new(move |g| {
            let mut grads: Vec<Option<Vec<f32>>> = w
                .iter()
                .map(|&wk| Some(g.iter().map(|v| v * wk).collect()))
                .collect();
            let gw = saved
                .iter()
                .map(|x| x.iter().zip(g).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>() as f32)
                .collect();
            grads.push(Some(gw));
            grads
        });
        let mut all: Vec<&Tensor> = inputs.to_vec();
        all.push(weights);
        Tensor::record(out, first.shape(), &all, backward)
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        let x = self.data();
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                let e = ((v - max) as f64).exp();
                *o = e as f32;
                z += e;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o = (*o as f64 / z) as f32;
            }
        }
        let saved = Rc::new(out);
        let y = saved.clone();
        let backward: BackwardFn = Box::new(move |g| {
            let mut gx = vec![0.0f32; rows * cols];
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    gx[r * cols + c] = yr[c] * (gr[c] - dot);
                }
            }
            vec![Some(gx)]
        });
        Tensor::record_rc(saved, &[rows, cols], &[self], backward)
    }

    /// Row `r` of a rank-2 tensor as a 1-D tensor.
    pub fn row(&self, r: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        if r >= rows {
            return shape_err("row", format!("row {r} out of {rows}"));
        }
        let out = self.data()[r * cols..(r + 1) * cols].to_vec();
        let backward: BackwardFn = Box::new(move |g| {
            let mut gx = vec![0.0; rows * cols];
            gx[r * cols..(r + 1) * cols].copy_from_slice(g);
            vec![Some(gx)]
        });
        Tensor::record(out, &[cols], &[self], backward)
    }

    /// Multiplies every element of sample `i` (leading dimension) by
    /// `factors[i]`. Used for drop-path.
    pub fn mul_per_sample(&self, factors: &[f32]) -> Result<Tensor> {
        let n = *self.shape().first().ok_or(TensorError::Empty("mul_per_sample"))?;
        if factors.len() != n {
            return shape_err("mul_per_sample", format!("{} factors for batch {n}", factors.len()));
        }
        let per = self.len() / n.max(1);
        let f = factors.to_vec();
        let mut out = self.to_vec();
        for (i, chunk) in out.chunks_mut(per.max(1)).enumerate().take(n) {
            chunk.iter_mut().for_each(|v| *v *= f[i]);
        }
        let backward: BackwardFn = Box::new(move |g| {
            let mut gx = g.to_vec();
            for (i, chunk) in gx.chunks_mut(per.max(1)).enumerate().take(n) {
                chunk.iter_mut().for_each(|v| *v *= f[i]);
            }
            vec![Some(gx)]
        });
        Tensor::record(out, self.shape(), &[self], backward)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let t = Tensor::from_vec(vec![0.0, 0.0, 0.0, 10.0, 0.0, 0.0], &[2, 3]).unwrap();
        let s = t.softmax_rows().unwrap();
        let d = s.data();
        for v in &d[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        assert!(d[3] > 0.99);
        let shifted = Tensor::from_vec(vec![5.0, 5.0, 5.0, 20.0, 10.0, 10.0], &[2, 3]).unwrap();
        let s2 = shifted.softmax_rows().unwrap();
        for (a, b) in d.iter().zip(s2.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn weighted_sum_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![3.0, -1.0], &[2]).unwrap());
        let w = tape.leaf(Tensor::from_vec(vec![0.25, 0.75], &[2]).unwrap());
        let y = Tensor::weighted_sum(&[&a, &b], &w).unwrap();
        assert_eq!(y.data(), &[2.5, -0.25]);
        let g = tape.backward(&y.sum()).unwrap();
        assert_eq!(g.get(&a).unwrap(), &[0.25, 0.25]);
        assert_eq!(g.get(&b).unwrap(), &[0.75, 0.75]);
        assert_eq!(g.get(&w).unwrap(), &[3.0, 2.0]);
    }

    #[test]
    fn relu_masks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.5, 2.0], &[3]).unwrap());
        let y = x.relu().unwrap().sum();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn untracked_ops_do_not_record() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.relu().unwrap().scale(2.0).unwrap();
        assert!(!y.is_tracked());
    }
}
