use crate::error::{shape_err, Result, TensorError};
use crate::gemm::gemm;
use crate::tape::BackwardFn;
use crate::tensor::Tensor;

impl Tensor {
    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Empty("concat_channels"))?;
        let (n, _, h, w) = first.dims4()?;
        let mut chans = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return shape_err("concat_channels", format!("{:?} vs {:?}", first.shape(), p.shape()));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (p, &pc) in parts.iter().zip(&chans) {
                out.extend_from_slice(&p.data()[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        let backward: BackwardFn = Box::new(move |g| {
            let mut grads: Vec<Vec<f32>> = chans.iter().map(|&pc| Vec::with_capacity(n * pc * hw)).collect();
            let mut off = 0;
            for _ in 0..n {
                for (gp, &pc) in grads.iter_mut().zip(&chans) {
                    gp.extend_from_slice(&g[off..off + pc * hw]);
                    off += pc * hw;
                }
            }
            grads.into_iter().map(Some).collect()
        });
        Tensor::record(out, &[n, total, h, w], parts, backward)
    }

    /// `x[:, :, top.., left..]`.
    pub fn crop_spatial(&self, top: usize, left: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if top >= h || left >= w {
            return shape_err("crop_spatial", format!("offset ({top},{left}) on {h}x{w}"));
        }
        let (ho, wo) = (h - top, w - left);
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            for y in top..h {
                out.extend_from_slice(&x[(p * h + y) * w + left..(p * h + y + 1) * w]);
            }
        }
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0f32; n * c * h * w];
            for p in 0..n * c {
                for y in 0..ho {
                    let src = &g[(p * ho + y) * wo..(p * ho + y + 1) * wo];
                    let start = (p * h + y + top) * w + left;
                    dx[start..start + wo].copy_from_slice(src);
                }
            }
            vec![Some(dx)]
        });
        Tensor::record(out, &[n, c, ho, wo], &[self], backward)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if factor == 0 {
            return shape_err("upsample_nearest", "factor 0");
        }
        if factor == 1 {
            return self.reshape(self.shape());
        }
        let (ho, wo) = (h * factor, w * factor);
        let x = self.data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        for p in 0..n * c {
            for oy in 0..ho {
                let src = &x[(p * h + oy / factor) * w..(p * h + oy / factor + 1) * w];
                let dst = &mut out[(p * ho + oy) * wo..(p * ho + oy + 1) * wo];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = src[ox / factor];
                }
            }
        }
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0f32; n * c * h * w];
            for p in 0..n * c {
                for oy in 0..ho {
                    let row = &g[(p * ho + oy) * wo..(p * ho + oy + 1) * wo];
                    let dst = &mut dx[(p * h + oy / factor) * w..(p * h + oy / factor + 1) * w];
                    for (ox, gv) in row.iter().enumerate() {
                        dst[ox / factor] += gv;
                    }
                }
            }
            vec![Some(dx)]
        });
        Tensor::record(out, &[n, c, ho, wo], &[self], backward)
    }

    /// Affine map `x · Wᵀ + b` for `x: [N, I]`, `W: [O, I]`, `b: [O]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (n, i) = self.dims2()?;
        let (o, wi) = weight.dims2()?;
        if wi != i {
            return shape_err("linear", format!("input {:?} vs weight {:?}", self.shape(), weight.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return shape_err("linear", format!("bias {:?} for {o} outputs", b.shape()));
            }
        }
        let mut out = vec![0.0f32; n * o];
        gemm(n, i, o, self.data(), false, weight.data(), true, &mut out, false);
        if let Some(b) = bias {
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
            }
        }
        let x = self.data_rc().clone();
        let wt = weight.data_rc().clone();
        let has_bias = bias.is_some();
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0f32; n * i];
            gemm(n, o, i, g, false, &wt, false, &mut dx, false);
            let mut dw = vec![0.0f32; o * i];
            gemm(o, n, i, g, true, &x, false, &mut dw, false);
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                let mut db = vec![0.0f32; o];
                for row in g.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                grads.push(Some(db));
            }
            grads
        });
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Tensor::record(out, &[n, o], &inputs, backward)
    }

    /// Replaces every masked pixel (all channels) with the per-channel
    /// `fill` vector. `pixel_mask` has one entry per (sample, y, x).
    pub fn mask_substitute(&self, pixel_mask: &[bool], fill: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        if pixel_mask.len() != n * hw {
            return shape_err(
                "mask_substitute",
                format!("mask of {} entries for batch {:?}", pixel_mask.len(), self.shape()),
            );
        }
        if fill.shape() != [c] {
            return shape_err("mask_substitute", format!("fill {:?} for {c} channels", fill.shape()));
        }
        let mut out = self.to_vec();
        let fv = fill.data();
        for s in 0..n {
            let m = &pixel_mask[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let plane = &mut out[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (v, &masked) in plane.iter_mut().zip(m) {
                    if masked {
                        *v = fv[ch];
                    }
                }
            }
        }
        let mask = pixel_mask.to_vec();
        let backward: BackwardFn = Box::new(move |g| {
            let mut dx = g.to_vec();
            let mut dfill = vec![0.0f32; c];
            for s in 0..n {
                let m = &mask[s * hw..(s + 1) * hw];
                for ch in 0..c {
                    let off = (s * c + ch) * hw;
                    for (k, &masked) in m.iter().enumerate() {
                        if masked {
                            dfill[ch] += dx[off + k];
                            dx[off + k] = 0.0;
                        }
                    }
                }
            }
            vec![Some(dx), Some(dfill)]
        });
        Tensor::record(out, self.shape(), &[self, fill], backward)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn concat_then_backward_splits_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[2, 1, 2, 2], 1.0));
        let b = tape.leaf(Tensor::full(&[2, 2, 2, 2], 2.0));
        let y = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        assert_eq!(&y.data()[..4], &[1.0; 4]);
        assert_eq!(&y.data()[4..12], &[2.0; 8]);
        let w: Vec<f32> = (0..y.len()).map(|i| i as f32).collect();
        let l = y.mul(&Tensor::from_vec(w, y.shape()).unwrap()).unwrap().sum();
        let g = tape.backward(&l).unwrap();
        assert_eq!(g.get(&a).unwrap(), &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn upsample_gradient_sums_blocks() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap());
        let y = x.upsample_nearest(2).unwrap();
        assert_eq!(y.data()[..4], [1.0, 1.0, 2.0, 2.0]);
        let g = tape.backward(&y.sum()).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[4.0; 4]);
    }

    #[test]
    fn crop_drops_leading_rows_and_columns() {
        let x = Tensor::from_vec((0..9).map(|v| v as f32).collect(), &[1, 1, 3, 3]).unwrap();
        let y = x.crop_spatial(1, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn linear_matches_manual() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap());
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 0.0, 0.5, -1.0, 2.0, 1.0], &[3, 2]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![0.0, 1.0, 0.0], &[3]).unwrap());
        let y = x.linear(&w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.0, -0.5, 4.0, 3.0, -1.5, 10.0]);
        let g = tape.backward(&y.sum()).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[3.5, 0.0, 3.5, 0.0]);
        assert_eq!(g.get(&w).unwrap(), &[4.0, 6.0, 4.0, 6.0, 4.0, 6.0]);
        assert_eq!(g.get(&b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn mask_substitute_routes_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 1, 2]).unwrap());
        let e = tape.leaf(Tensor::from_vec(vec![9.0, 8.0], &[2]).unwrap());
        let y = x.mask_substitute(&[true, false], &e).unwrap();
        assert_eq!(y.data(), &[9.0, 2.0, 8.0, 4.0]);
        let g = tape.backward(&y.sum()).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(g.get(&e).unwrap(), &[1.0, 1.0]);
    }
}
