use crate::error::{shape_err, Result};
use crate::tape::BackwardFn;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Average over the in-bounds part of the window (padding excluded).
    Avg,
}

impl Tensor {
    /// Square-window pooling with implicit padding; padded cells never win a
    /// max and never count towards an average.
    pub fn pool2d(&self, kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel || padding >= kernel {
            return shape_err(
                "pool2d",
                format!("kernel {kernel}, stride {stride}, padding {padding} on {h}x{w}"),
            );
        }
        let ho = (h + 2 * padding - kernel) / stride + 1;
        let wo = (w + 2 * padding - kernel) / stride + 1;
        let x = self.data();
        let planes = n * c;
        let mut out = vec![0.0f32; planes * ho * wo];
        // Max: flat input index of the winner. Avg: number of in-bounds cells.
        let mut aux = vec![0u32; planes * ho * wo];
        let window = move |o: usize, len: usize| {
            let start = (o * stride) as isize - padding as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + kernel as isize) as usize).min(len);
            (lo, hi)
        };
        for p in 0..planes {
            let xp = &x[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                let (ylo, yhi) = window(oy, h);
                for ox in 0..wo {
                    let (xlo, xhi) = window(ox, w);
                    let oi = (p * ho + oy) * wo + ox;
                    match kind {
                        PoolKind::Max => {
                            let mut best = f32::NEG_INFINITY;
                            let mut arg = ylo * w + xlo;
                            for iy in ylo..yhi {
                                for ix in xlo..xhi {
                                    let v = xp[iy * w + ix];
                                    if v > best {
                                        best = v;
                                        arg = iy * w + ix;
                                    }
                                }
                            }
                            out[oi] = best;
                            aux[oi] = (p * h * w + arg) as u32;
                        }
                        PoolKind::Avg => {
                            let mut s = 0.0f32;
                            for iy in ylo..yhi {
                                for ix in xlo..xhi {
                                    s += xp[iy * w + ix];
                                }
                            }
                            let count = ((yhi - ylo) * (xhi - xlo)) as u32;
                            out[oi] = s / count as f32;
                            aux[oi] = count;
                        }
                    }
                }
            }
        }
        let in_len = self.len();
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0f32; in_len];
            match kind {
                PoolKind::Max => {
                    for (gv, &arg) in g.iter().zip(&aux) {
                        dx[arg as usize] += gv;
                    }
                }
                PoolKind::Avg => {
                    for p in 0..planes {
                        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
                        for oy in 0..ho {
                            let (ylo, yhi) = window(oy, h);
                            for ox in 0..wo {
                                let (xlo, xhi) = window(ox, w);
                                let oi = (p * ho + oy) * wo + ox;
                                let share = g[oi] / aux[oi] as f32;
                                for iy in ylo..yhi {
                                    for v in &mut dxp[iy * w + xlo..iy * w + xhi] {
                                        *v += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        });
        Tensor::record(out, &[n, c, ho, wo], &[self], backward)
    }

    /// Mean over spatial dimensions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let out: Vec<f32> = self
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f32>() / hw as f32)
            .collect();
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0f32; n * c * hw];
            for (chunk, gv) in dx.chunks_mut(hw).zip(g) {
                chunk.fill(gv / hw as f32);
            }
            vec![Some(dx)]
        });
        Tensor::record(out, &[n, c], &[self], backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn avg_pool_excludes_padding() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = x.pool2d(PoolKind::Avg, 3, 1, 1).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-7));
    }

    #[test]
    fn max_pool_stride_two() {
        let x = Tensor::from_vec((0..16).map(|v| v as f32).collect(), &[1, 1, 4, 4]).unwrap();
        let y = x.pool2d(PoolKind::Max, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn pool_gradients_match_finite_differences() {
        let vals: Vec<f32> = (0..2 * 2 * 5 * 5).map(|i| ((i * 7919 % 97) as f32) * 0.1).collect();
        let probe: Vec<f32> = (0..2 * 2 * 5 * 5).map(|i| ((i as f32) * 0.37).cos()).collect();
        for kind in [PoolKind::Max, PoolKind::Avg] {
            for stride in [1, 2] {
                let f = |v: &[f32]| -> f64 {
                    let t = Tensor::from_vec(v.to_vec(), &[2, 2, 5, 5]).unwrap();
                    let y = t.pool2d(kind, 3, stride, 1).unwrap();
                    y.data().iter().zip(&probe).map(|(a, b)| (*a * *b) as f64).sum()
                };
                let tape = Tape::new();
                let x = tape.leaf(Tensor::from_vec(vals.clone(), &[2, 2, 5, 5]).unwrap());
                let y = x.pool2d(kind, 3, stride, 1).unwrap();
                let pr = Tensor::from_vec(probe[..y.len()].to_vec(), y.shape()).unwrap();
                let g = tape.backward(&y.mul(&pr).unwrap().sum()).unwrap();
                let g = g.get(&x).unwrap();
                for i in 0..vals.len() {
                    let mut p = vals.clone();
                    p[i] += 1e-3;
                    let mut m = vals.clone();
                    m[i] -= 1e-3;
                    let num = (f(&p) - f(&m)) / 2e-3;
                    assert!((num - g[i] as f64).abs() < 1e-2, "{kind:?} s{stride} idx {i}: {num} vs {}", g[i]);
                }
            }
        }
    }
}
