use crate::error::{shape_err, Result, TensorError};
use crate::gemm::gemm;
use crate::tape::BackwardFn;
use crate::tensor::Tensor;

/// Stride, zero padding, dilation and grouping of a 2-D convolution.
///
/// Supported groupings are dense (`groups == 1`) and depthwise
/// (`groups == in_channels == out_channels`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    dil: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns `ox` whose input column `ox*s + off - pad`
    /// falls inside `[0, w)`.
    fn valid_cols(&self, off: usize) -> (usize, usize) {
        valid_range(self.w, self.wo, self.stride, off, self.pad)
    }

    fn valid_rows(&self, off: usize) -> (usize, usize) {
        valid_range(self.h, self.ho, self.stride, off, self.pad)
    }
}

fn valid_range(len: usize, out_len: usize, stride: usize, off: usize, pad: usize) -> (usize, usize) {
    // o*stride + off - pad >= 0  <=>  o >= ceil((pad - off) / stride)
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    // o*stride + off - pad <= len - 1
    let hi = if len + pad > off {
        ((len + pad - off - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst.fill(0.0);
                let (ylo, yhi) = g.valid_rows(ky * g.dil);
                let (xlo, xhi) = g.valid_cols(kx * g.dil);
                if xlo == xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky * g.dil - g.pad;
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = xlo + kx * g.dil - g.pad;
                        d[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            d[ox] = src[ox * g.stride + kx * g.dil - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Geometry, dx: &mut [f32]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (ylo, yhi) = g.valid_rows(ky * g.dil);
                let (xlo, xhi) = g.valid_cols(kx * g.dil);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky * g.dil - g.pad;
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    let d = &mut dxc[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        d[ox * g.stride + kx * g.dil - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward(x: &[f32], w: &[f32], g: &Geometry, out: &mut [f32]) {
    let (hw, plane, ksz) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for c in 0..g.c {
        let xc = &x[c * hw..(c + 1) * hw];
        let oc = &mut out[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_rows(ky * g.dil);
            for kx in 0..g.kw {
                let wv = w[c * ksz + ky * g.kw + kx];
                let (xlo, xhi) = g.valid_cols(kx * g.dil);
                if xlo == xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky * g.dil - g.pad;
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut oc[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = xlo + kx * g.dil - g.pad;
                        for (d, s) in dst[xlo..xhi].iter_mut().zip(&src[ix0..]) {
                            *d += wv * s;
                        }
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] += wv * src[ox * g.stride + kx * g.dil - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    x: &[f32],
    w: &[f32],
    g: &Geometry,
    dout: &[f32],
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
) {
    let (hw, plane, ksz) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    let mut dx = dx;
    let mut dw = dw;
    for c in 0..g.c {
        let xc = &x[c * hw..(c + 1) * hw];
        let gc = &dout[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_rows(ky * g.dil);
            for kx in 0..g.kw {
                let widx = c * ksz + ky * g.kw + kx;
                let wv = w[widx];
                let (xlo, xhi) = g.valid_cols(kx * g.dil);
                let mut acc = 0.0f32;
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky * g.dil - g.pad;
                    let grow = &gc[oy * g.wo..(oy + 1) * g.wo];
                    let base = iy * g.w + kx * g.dil;
                    if dw.is_some() {
                        for ox in xlo..xhi {
                            acc += grow[ox] * xc[base + ox * g.stride - g.pad];
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let dxc = &mut dx[c * hw..(c + 1) * hw];
                        for ox in xlo..xhi {
                            dxc[base + ox * g.stride - g.pad] += wv * grow[ox];
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[widx] += acc;
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D convolution of an NCHW input with an `[O, C/groups, kh, kw]`
    /// kernel and optional per-output-channel bias.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, p: ConvParams) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let (o, ci_per_group, kh, kw) = weight.dims4()?;
        let depthwise = p.groups > 1;
        if depthwise {
            if p.groups != c || o != c || ci_per_group != 1 {
                return Err(TensorError::Unsupported {
                    op: "conv2d",
                    detail: format!(
                        "groups={} with input channels {c}, kernel {:?}; only dense or depthwise supported",
                        p.groups,
                        weight.shape()
                    ),
                });
            }
        } else if ci_per_group != c {
            return shape_err("conv2d", format!("input {:?} vs kernel {:?}", self.shape(), weight.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return shape_err("conv2d", format!("bias {:?} for {o} outputs", b.shape()));
            }
        }
        let (Some(ho), Some(wo)) = (p.output_size(h, kh), p.output_size(w, kw)) else {
            return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}"));
        };
        let g = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            stride: p.stride,
            pad: p.padding,
            dil: p.dilation,
        };
        let plane = ho * wo;
        let k = c * kh * kw;
        let xd = self.data();
        let wd = weight.data();
        let mut out = vec![0.0f32; n * o * plane];

        if depthwise {
            for s in 0..n {
                depthwise_forward(
                    &xd[s * c * h * w..(s + 1) * c * h * w],
                    wd,
                    &g,
                    &mut out[s * o * plane..(s + 1) * o * plane],
                );
            }
        } else {
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; k * plane] };
            for s in 0..n {
                let xs = &xd[s * c * h * w..(s + 1) * c * h * w];
                let b: &[f32] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &g, &mut cols);
                    &cols
                };
                gemm(o, k, plane, wd, false, b, false, &mut out[s * o * plane..(s + 1) * o * plane], false);
            }
        }
        if let Some(b) = bias {
            let bd = b.data();
            for chunk in out.chunks_mut(plane) .enumerate() {
                let (i, ch) = chunk;
                let bv = bd[i % o];
                ch.iter_mut().for_each(|v| *v += bv);
            }
        }

        let need_dx = self.is_tracked();
        let need_dw = weight.is_tracked();
        let x_saved = self.data_rc().clone();
        let w_saved = weight.data_rc().clone();
        let has_bias = bias.is_some();
        let backward: BackwardFn = Box::new(move |dout: &[f32]| {
            let mut dx = need_dx.then(|| vec![0.0f32; n * c * h * w]);
            let mut dw = need_dw.then(|| vec![0.0f32; w_saved.len()]);
            if depthwise {
                for s in 0..n {
                    depthwise_backward(
                        &x_saved[s * c * h * w..(s + 1) * c * h * w],
                        &w_saved,
                        &g,
                        &dout[s * o * plane..(s + 1) * o * plane],
                        dx.as_mut().map(|d| &mut d[s * c * h * w..(s + 1) * c * h * w]),
                        dw.as_deref_mut(),
                    );
                }
            } else {
                let pointwise = g.is_pointwise();
                let mut cols = if pointwise { Vec::new() } else { vec![0.0f32; k * plane] };
                let mut dcols = if pointwise { Vec::new() } else { vec![0.0f32; k * plane] };
                for s in 0..n {
                    let ds = &dout[s * o * plane..(s + 1) * o * plane];
                    let xs = &x_saved[s * c * h * w..(s + 1) * c * h * w];
                    if let Some(dw) = dw.as_mut() {
                        let b: &[f32] = if pointwise {
                            xs
                        } else {
                            im2col(xs, &g, &mut cols);
                            &cols
                        };
                        gemm(o, plane, k, ds, false, b, true, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxs = &mut dx[s * c * h * w..(s + 1) * c * h * w];
                        if pointwise {
                            gemm(k, o, plane, &w_saved, true, ds, false, dxs, true);
                        } else {
                            gemm(k, o, plane, &w_saved, true, ds, false, &mut dcols, false);
                            col2im(&dcols, &g, dxs);
                        }
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                let mut db = vec![0.0f32; o];
                for (i, ch) in dout.chunks(plane).enumerate() {
                    db[i % o] += ch.iter().sum::<f32>();
                }
                grads.push(Some(db));
            }
            grads
        });
        let mut inputs: Vec<&Tensor> = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Tensor::record(out, &[n, o, ho, wo], &inputs, backward)
    }
}

/// Direct seven-loop convolution used as a test oracle.
#[doc(hidden)]
pub fn conv2d_reference(x: &Tensor, w: &Tensor, p: ConvParams) -> Vec<f32> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, cig, kh, kw) = w.dims4().unwrap();
    let ho = p.output_size(h, kh).unwrap();
    let wo = p.output_size(wd, kw).unwrap();
    let opg = o / p.groups;
    let mut out = vec![0.0f32; n * o * ho * wo];
    for s in 0..n {
        for oc in 0..o {
            let grp = oc / opg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    for icg in 0..cig {
                        let ic = grp * cig + icg;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride + ky * p.dilation) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx * p.dilation) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cig + icg) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((s * o + oc) * ho + oy) * wo + ox] = acc as f32;
                }
            }
        }
    }
    let _ = c;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn seq(n: usize, f: f32) -> Vec<f32> {
        (0..n).map(|i| ((i as f32 + 1.0) * f).sin()).collect()
    }

    fn check(shape_x: [usize; 4], shape_w: [usize; 4], p: ConvParams) {
        let x = Tensor::from_vec(seq(shape_x.iter().product(), 0.31), &shape_x).unwrap();
        let w = Tensor::from_vec(seq(shape_w.iter().product(), 0.17), &shape_w).unwrap();
        let got = x.conv2d(&w, None, p).unwrap();
        let want = conv2d_reference(&x, &w, p);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b} for {p:?}");
        }
    }

    #[test]
    fn dense_matches_reference() {
        check([2, 3, 7, 6], [4, 3, 3, 3], ConvParams::new(1, 1, 1, 1));
        check([1, 2, 8, 8], [3, 2, 3, 3], ConvParams::new(2, 1, 1, 1));
        check([1, 2, 9, 8], [2, 2, 3, 3], ConvParams::new(1, 2, 2, 1));
        check([2, 4, 5, 5], [3, 4, 1, 1], ConvParams::default());
        check([1, 4, 6, 6], [3, 4, 1, 1], ConvParams::new(2, 0, 1, 1));
    }

    #[test]
    fn depthwise_matches_reference() {
        check([2, 3, 7, 7], [3, 1, 3, 3], ConvParams::new(1, 1, 1, 3));
        check([1, 4, 8, 8], [4, 1, 5, 5], ConvParams::new(2, 2, 1, 4));
        check([1, 2, 8, 8], [2, 1, 3, 3], ConvParams::new(1, 2, 2, 2));
        check([1, 2, 9, 9], [2, 1, 5, 5], ConvParams::new(2, 4, 2, 2));
    }

    fn finite_diff(shape_x: [usize; 4], shape_w: [usize; 4], p: ConvParams) {
        let xv = seq(shape_x.iter().product(), 0.29);
        let wv = seq(shape_w.iter().product(), 0.13);
        let probe = seq(
            shape_x[0] * shape_w[0] * p.output_size(shape_x[2], shape_w[2]).unwrap() * p.output_size(shape_x[3], shape_w[3]).unwrap(),
            0.07,
        );
        let loss = |xv: &[f32], wv: &[f32]| -> f64 {
            let x = Tensor::from_vec(xv.to_vec(), &shape_x).unwrap();
            let w = Tensor::from_vec(wv.to_vec(), &shape_w).unwrap();
            let y = conv2d_reference(&x, &w, p);
            y.iter().zip(&probe).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(xv.clone(), &shape_x).unwrap());
        let w = tape.leaf(Tensor::from_vec(wv.clone(), &shape_w).unwrap());
        let y = x.conv2d(&w, None, p).unwrap();
        let pr = Tensor::from_vec(probe.clone(), y.shape()).unwrap();
        let l = y.mul(&pr).unwrap().sum();
        let g = tape.backward(&l).unwrap();
        let eps = 1e-2f32;
        for (vals, grad, is_x) in [(&xv, g.get(&x).unwrap(), true), (&wv, g.get(&w).unwrap(), false)] {
            for i in (0..vals.len()).step_by(3) {
                let mut plus = vals.clone();
                plus[i] += eps;
                let mut minus = vals.clone();
                minus[i] -= eps;
                let num = if is_x {
                    (loss(&plus, &wv) - loss(&minus, &wv)) / (2.0 * eps as f64)
                } else {
                    (loss(&xv, &plus) - loss(&xv, &minus)) / (2.0 * eps as f64)
                };
                assert!((num - grad[i] as f64).abs() < 2e-3, "idx {i}: {num} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_diff([1, 2, 6, 6], [3, 2, 3, 3], ConvParams::new(1, 1, 1, 1));
        finite_diff([2, 2, 7, 7], [2, 2, 3, 3], ConvParams::new(2, 2, 2, 1));
        finite_diff([1, 3, 6, 6], [3, 1, 3, 3], ConvParams::new(1, 1, 1, 3));
        finite_diff([1, 3, 8, 8], [3, 1, 5, 5], ConvParams::new(2, 4, 2, 3));
        finite_diff([2, 3, 4, 4], [2, 3, 1, 1], ConvParams::default());
    }

    #[test]
    fn maps_smaller_than_the_dilated_kernel() {
        for hw in [(1, 1), (2, 2), (1, 3)] {
            let p = ConvParams::new(1, 4, 2, 2);
            check([1, 2, hw.0, hw.1], [2, 1, 5, 5], p);
            check([1, 2, hw.0, hw.1], [3, 2, 5, 5], ConvParams::new(1, 4, 2, 1));
            finite_diff([1, 2, hw.0, hw.1], [2, 1, 5, 5], p);
            finite_diff([1, 2, hw.0, hw.1], [2, 1, 3, 3], ConvParams::new(2, 2, 2, 2));
        }
    }

    #[test]
    fn bias_gradient_is_output_sum() {
        let tape = Tape::new();
        let x = Tensor::from_vec(seq(2 * 2 * 3 * 3, 0.5), &[2, 2, 3, 3]).unwrap();
        let w = tape.leaf(Tensor::from_vec(seq(2 * 2, 0.2), &[2, 2, 1, 1]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![0.5, -0.5], &[2]).unwrap());
        let y = x.conv2d(&w, Some(&b), ConvParams::default()).unwrap();
        let g = tape.backward(&y.sum()).unwrap();
        assert_eq!(g.get(&b).unwrap(), &[18.0, 18.0]);
    }

    #[test]
    fn rejects_general_groups() {
        let x = Tensor::zeros(&[1, 4, 4, 4]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        assert!(x.conv2d(&w, None, ConvParams::new(1, 1, 1, 2)).is_err());
    }
}
