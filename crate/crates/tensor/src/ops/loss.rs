use crate::error::{shape_err, Result, TensorError};
use crate::tape::BackwardFn;
use crate::tensor::Tensor;

impl Tensor {
    /// Mean absolute error over masked pixels only, across all channels.
    ///
    /// `pixel_mask` has one entry per (sample, y, x) and is broadcast over
    /// channels. Returns the scalar loss and the number of contributing
    /// elements. Errors when nothing is masked.
    pub fn masked_l1(&self, target: &[f32], pixel_mask: &[bool]) -> Result<(Tensor, usize)> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        if target.len() != self.len() || pixel_mask.len() != n * hw {
            return shape_err(
                "masked_l1",
                format!(
                    "prediction {:?}, target of {}, mask of {}",
                    self.shape(),
                    target.len(),
                    pixel_mask.len()
                ),
            );
        }
        let masked_pixels = pixel_mask.iter().filter(|&&m| m).count();
        let count = masked_pixels * c;
        if count == 0 {
            return Err(TensorError::Empty("masked_l1"));
        }
        let pred = self.data();
        let mut total = 0.0f64;
        for s in 0..n {
            let m = &pixel_mask[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for k in 0..hw {
                    if m[k] {
                        total += (pred[off + k] as f64 - target[off + k] as f64).abs();
                    }
                }
            }
        }
        let value = (total / count as f64) as f32;
        let signs: Vec<i8> = (0..self.len())
            .map(|i| {
                let s = i / (c * hw);
                if !pixel_mask[s * hw + i % hw] {
                    return 0;
                }
                match pred[i].partial_cmp(&target[i]) {
                    Some(std::cmp::Ordering::Greater) => 1,
                    Some(std::cmp::Ordering::Less) => -1,
                    _ => 0,
                }
            })
            .collect();
        let inv = 1.0 / count as f32;
        let backward: BackwardFn = Box::new(move |g| {
            let k = g[0] * inv;
            vec![Some(signs.iter().map(|&s| s as f32 * k).collect())]
        });
        Ok((Tensor::record(vec![value], &[], &[self], backward)?, count))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (n, k) = self.dims2()?;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return shape_err("cross_entropy", format!("{} labels for logits {:?}", labels.len(), self.shape()));
        }
        if n == 0 {
            return Err(TensorError::Empty("cross_entropy"));
        }
        let x = self.data();
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0.0f64;
        for r in 0..n {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = row.iter().map(|v| ((v - max) as f64).exp()).sum();
            for c in 0..k {
                probs[r * k + c] = (((row[c] - max) as f64).exp() / z) as f32;
            }
            total += z.ln() + max as f64 - row[labels[r]] as f64;
        }
        let labels = labels.to_vec();
        let backward: BackwardFn = Box::new(move |g| {
            let scale = g[0] / n as f32;
            let mut dx = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                dx[r * k + l] -= 1.0;
            }
            dx.iter_mut().for_each(|v| *v *= scale);
            vec![Some(dx)]
        });
        Tensor::record(vec![(total / n as f64) as f32], &[], &[self], backward)
    }
}
