use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::tape::BackwardFn;
use crate::tensor::Tensor;

/// Per-channel batch statistics. `var` is the biased (population)
/// variance used for normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// Number of elements each channel statistic was computed over.
    pub count: usize,
}

pub struct BatchNormOutput {
    pub output: Tensor,
    pub stats: BatchStats,
}

fn check_affine(c: usize, gamma: Option<&Tensor>, beta: Option<&Tensor>) -> Result<()> {
    for t in [gamma, beta].into_iter().flatten() {
        if t.shape() != [c] {
            return shape_err("batch_norm", format!("affine parameter {:?} for {c} channels", t.shape()));
        }
    }
    Ok(())
}

impl Tensor {
    /// Batch normalization over (N, H, W) using the current batch's
    /// statistics, with optional affine scale and shift.
    pub fn batch_norm_train(
        &self,
        gamma: Option<&Tensor>,
        beta: Option<&Tensor>,
        eps: f32,
    ) -> Result<BatchNormOutput> {
        let (n, c, h, w) = self.dims4()?;
        check_affine(c, gamma, beta)?;
        let hw = h * w;
        let m = n * hw;
        let x = self.data();
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for s_i in 0..n {
                s += x[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = s / m as f64;
            let mut ss = 0.0f64;
            for s_i in 0..n {
                ss += x[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw]
                    .iter()
                    .map(|&v| (v as f64 - mu) * (v as f64 - mu))
                    .sum::<f64>();
            }
            mean[ch] = mu as f32;
            var[ch] = (ss / m as f64) as f32;
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; x.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let off = (s_i * c + ch) * hw;
                let (mu, is) = (mean[ch], inv_std[ch]);
                for (o, v) in xhat[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                    *o = (v - mu) * is;
                }
            }
        }
        let xhat = Rc::new(xhat);
        let gamma_v = gamma.map(|g| g.to_vec());
        let out = match (&gamma_v, beta) {
            (None, None) => xhat.clone(),
            _ => {
                let bv = beta.map(|b| b.to_vec());
                let mut y = xhat.as_ref().clone();
                for s_i in 0..n {
                    for ch in 0..c {
                        let off = (s_i * c + ch) * hw;
                        let gm = gamma_v.as_ref().map_or(1.0, |g| g[ch]);
                        let bt = bv.as_ref().map_or(0.0, |b| b[ch]);
                        y[off..off + hw].iter_mut().for_each(|v| *v = *v * gm + bt);
                    }
                }
                Rc::new(y)
            }
        };
        let has_gamma = gamma.is_some();
        let has_beta = beta.is_some();
        let saved = xhat.clone();
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0f32; n * c * hw];
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for ch in 0..c {
                let gm = gamma_v.as_ref().map_or(1.0, |gv| gv[ch]);
                let mut sum_g = 0.0f64;
                let mut sum_gx = 0.0f64;
                for s_i in 0..n {
                    let off = (s_i * c + ch) * hw;
                    for (gv, xv) in g[off..off + hw].iter().zip(&saved[off..off + hw]) {
                        sum_g += *gv as f64;
                        sum_gx += (*gv as f64) * (*xv as f64);
                    }
                }
                dgamma[ch] = sum_gx as f32;
                dbeta[ch] = sum_g as f32;
                let mean_g = (sum_g / m as f64) as f32;
                let mean_gx = (sum_gx / m as f64) as f32;
                let k = gm * inv_std[ch];
                for s_i in 0..n {
                    let off = (s_i * c + ch) * hw;
                    for i in off..off + hw {
                        dx[i] = k * (g[i] - mean_g - saved[i] * mean_gx);
                    }
                }
            }
            let mut grads = vec![Some(dx)];
            if has_gamma {
                grads.push(Some(dgamma));
            }
            if has_beta {
                grads.push(Some(dbeta));
            }
            grads
        });
        let mut inputs: Vec<&Tensor> = vec![self];
        inputs.extend(gamma);
        inputs.extend(beta);
        let output = Tensor::record_rc(out, self.shape(), &inputs, backward)?;
        Ok(BatchNormOutput {
            output,
            stats: BatchStats { mean, var, count: m },
        })
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batch_norm_eval(
        &self,
        mean: &[f32],
        var: &[f32],
        gamma: Option<&Tensor>,
        beta: Option<&Tensor>,
        eps: f32,
    ) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        check_affine(c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return shape_err("batch_norm_eval", format!("statistics of length {} for {c} channels", mean.len()));
        }
        let hw = h * w;
        let gv = gamma.map(|g| g.to_vec());
        let bv = beta.map(|b| b.to_vec());
        let scale: Vec<f32> = (0..c)
            .map(|ch| gv.as_ref().map_or(1.0, |g| g[ch]) / (var[ch] + eps).sqrt())
            .collect();
        let shift: Vec<f32> = (0..c)
            .map(|ch| bv.as_ref().map_or(0.0, |b| b[ch]) - mean[ch] * scale[ch])
            .collect();
        let mut out = self.to_vec();
        for s_i in 0..n {
            for ch in 0..c {
                let off = (s_i * c + ch) * hw;
                out[off..off + hw].iter_mut().for_each(|v| *v = *v * scale[ch] + shift[ch]);
            }
        }
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = g.to_vec();
            for s_i in 0..n {
                for ch in 0..c {
                    let off = (s_i * c + ch) * hw;
                    dx[off..off + hw].iter_mut().for_each(|v| *v *= scale[ch]);
                }
            }
            vec![Some(dx)]
        });
        Tensor::record(out, self.shape(), &[self], backward)
    }
}
