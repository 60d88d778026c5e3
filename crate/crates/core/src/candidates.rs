//! Implementations of the candidate operations placed on cell edges.

use maskarch_tensor::{ConvParams, PoolKind, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{BatchNorm, Conv, Ctx, ParamGroup, ParamStore};
use crate::search_space::OperationKind;

/// How candidate operations are instantiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpStyle {
    /// Learnable scale/shift in the batch norms inside operations.
    pub affine: bool,
    /// Follow pooling with a non-affine batch norm (DARTS search cells).
    pub pool_bn: bool,
}

#[derive(Clone, Debug)]
pub struct ReluConvBn {
    conv: Conv,
    bn: BatchNorm,
}

impl ReluConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        affine: bool,
    ) -> Self {
        let p = ConvParams::new(stride, kernel / 2, 1, 1);
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), group, cin, cout, kernel, p, false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), group, cout, affine),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        self.bn.forward(ctx, &self.conv.forward(ctx, &x.relu()?)?)
    }
}

/// ReLU, depthwise `k×k` (possibly dilated), pointwise `1×1`, BN.
#[derive(Clone, Debug)]
struct DwPwBn {
    dw: Conv,
    pw: Conv,
    bn: BatchNorm,
}

impl DwPwBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        affine: bool,
    ) -> Self {
        let pad = dilation * (kernel - 1) / 2;
        let dw_p = ConvParams::new(stride, pad, dilation, c);
        Self {
            dw: Conv::new(store, rng, &format!("{name}.dw"), ParamGroup::Op, c, c, kernel, dw_p, false),
            pw: Conv::new(store, rng, &format!("{name}.pw"), ParamGroup::Op, c, c, 1, ConvParams::default(), false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), ParamGroup::Op, c, affine),
        }
    }

    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = self.dw.forward(ctx, &x.relu()?)?;
        self.bn.forward(ctx, &self.pw.forward(ctx, &y)?)
    }
}

/// Halves resolution with two offset stride-2 `1×1` convolutions whose
/// outputs are concatenated.
#[derive(Clone, Debug)]
pub struct FactorizedReduce {
    conv1: Conv,
    conv2: Conv,
    bn: BatchNorm,
}

impl FactorizedReduce {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        affine: bool,
    ) -> Self {
        let p = ConvParams::new(2, 0, 1, 1);
        let half = cout / 2;
        Self {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), group, cin, half, 1, p, false),
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), group, cin, cout - half, 1, p, false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), group, cout, affine),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let r = x.relu()?;
        let a = self.conv1.forward(ctx, &r)?;
        let b = self.conv2.forward(ctx, &r.crop_spatial(1, 1)?)?;
        self.bn.forward(ctx, &Tensor::concat_channels(&[&a, &b])?)
    }
}

#[derive(Clone, Debug)]
pub enum CandidateOp {
    Zero { stride: usize },
    Identity,
    Reduce(FactorizedReduce),
    Pool {
        kind: PoolKind,
        stride: usize,
        bn: Option<BatchNorm>,
    },
    Sep(DwPwBnPair),
    Dil(Box<DwPwBnSingle>),
    Conv(ReluConvBn),
}

/// Separable convolution: the depthwise/pointwise block applied twice, the
/// first one carrying the stride.
#[derive(Clone, Debug)]
pub struct DwPwBnPair(DwPwBn, DwPwBn);

/// Dilated separable convolution (a single dilated block).
#[derive(Clone, Debug)]
pub struct DwPwBnSingle(DwPwBn);

impl CandidateOp {
    pub fn new(
        kind: OperationKind,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        stride: usize,
        style: OpStyle,
    ) -> Self {
        use OperationKind as K;
        let name = format!("{name}.{kind}");
        let pool = |store: &mut ParamStore, kind| CandidateOp::Pool {
            kind,
            stride,
            bn: style
                .pool_bn
                .then(|| BatchNorm::new(store, &format!("{name}.bn"), ParamGroup::Op, c, false)),
        };
        match kind {
            K::None => CandidateOp::Zero { stride },
            K::SkipConnect if stride == 1 => CandidateOp::Identity,
            K::SkipConnect => CandidateOp::Reduce(FactorizedReduce::new(
                store,
                rng,
                &name,
                ParamGroup::Op,
                c,
                c,
                style.affine,
            )),
            K::MaxPool3x3 => pool(store, PoolKind::Max),
            K::AvgPool3x3 => pool(store, PoolKind::Avg),
            K::SepConv3x3 | K::SepConv5x5 => {
                let k = if kind == K::SepConv3x3 { 3 } else { 5 };
                CandidateOp::Sep(DwPwBnPair(
                    DwPwBn::new(store, rng, &format!("{name}.0"), c, k, stride, 1, style.affine),
                    DwPwBn::new(store, rng, &format!("{name}.1"), c, k, 1, 1, style.affine),
                ))
            }
            K::DilConv3x3 | K::DilConv5x5 => {
                let k = if kind == K::DilConv3x3 { 3 } else { 5 };
                CandidateOp::Dil(Box::new(DwPwBnSingle(DwPwBn::new(
                    store,
                    rng,
                    &name,
                    c,
                    k,
                    stride,
                    2,
                    style.affine,
                ))))
            }
            K::Conv1x1 | K::Conv3x3 => {
                let k = if kind == K::Conv1x1 { 1 } else { 3 };
                CandidateOp::Conv(ReluConvBn::new(store, rng, &name, ParamGroup::Op, c, c, k, stride, style.affine))
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, CandidateOp::Zero { .. })
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, CandidateOp::Identity)
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        match self {
            CandidateOp::Zero { stride } => {
                let (n, c, h, w) = x.dims4()?;
                Ok(Tensor::zeros(&[n, c, h.div_ceil(*stride), w.div_ceil(*stride)]))
            }
            CandidateOp::Identity => Ok(x.clone()),
            CandidateOp::Reduce(fr) => fr.forward(ctx, x),
            CandidateOp::Pool { kind, stride, bn } => {
                let y = x.pool2d(*kind, 3, *stride, 1)?;
                match bn {
                    Some(bn) => bn.forward(ctx, &y),
                    None => Ok(y),
                }
            }
            CandidateOp::Sep(DwPwBnPair(a, b)) => b.forward(ctx, &a.forward(ctx, x)?),
            CandidateOp::Dil(d) => d.0.forward(ctx, x),
            CandidateOp::Conv(op) => op.forward(ctx, x),
        }
    }
}
