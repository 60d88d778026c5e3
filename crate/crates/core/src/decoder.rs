//! Reconstruction heads over the feature pyramid.

use maskarch_tensor::{ConvParams, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, ParamGroup, ParamStore};
use crate::supernet::FeaturePyramid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub embed_width: usize,
    pub use_hierarchical: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_width: 64,
            use_hierarchical: true,
        }
    }
}

pub const OUTPUT_CHANNELS: usize = 3;

/// Per-level `1×1` projections to width `D`, nearest upsampling, a sum at
/// full resolution and a `1×1` head to RGB. The flat variant only has the
/// F3 path.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub proj: [Option<Conv>; 3],
    pub head: Conv,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &DecoderConfig, channels: [usize; 3]) -> Result<Self> {
        if cfg.embed_width == 0 {
            return Err(Error::Validation(vec!["decoder.embed_width must be positive".into()]));
        }
        let d = cfg.embed_width;
        let p = ConvParams::default();
        let mut proj = [None, None, None];
        for (i, &c) in channels.iter().enumerate() {
            if cfg.use_hierarchical || i == 2 {
                proj[i] = Some(Conv::new(store, rng, &format!("decoder.proj{}", i + 1), ParamGroup::Decoder, c, d, 1, p, true));
            }
        }
        let head = Conv::new(store, rng, "decoder.head", ParamGroup::Decoder, d, OUTPUT_CHANNELS, 1, p, true);
        Ok(Self {
            cfg: cfg.clone(),
            proj,
            head,
        })
    }

    fn projection(&self, level: usize) -> Result<&Conv> {
        self.proj[level]
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("decoder has no projection for F{}", level + 1)))
    }

    /// `head(P1(F1) + up2(P2(F2)) + up4(P3(F3)))`.
    pub fn decode(&self, ctx: &Ctx, pyr: &FeaturePyramid) -> Result<Tensor> {
        pyr.check()?;
        let p1 = self.projection(0)?.forward(ctx, &pyr.f1)?;
        let p2 = self.projection(1)?.forward(ctx, &pyr.f2)?.upsample_nearest(2)?;
        let p3 = self.projection(2)?.forward(ctx, &pyr.f3)?.upsample_nearest(4)?;
        self.head.forward(ctx, &Tensor::add_n(&[&p1, &p2, &p3])?)
    }

    /// `head(up4(P3(F3)))`.
    pub fn decode_flat(&self, ctx: &Ctx, pyr: &FeaturePyramid) -> Result<Tensor> {
        pyr.check()?;
        let p3 = self.projection(2)?.forward(ctx, &pyr.f3)?.upsample_nearest(4)?;
        self.head.forward(ctx, &p3)
    }

    /// Dispatches on `use_hierarchical`.
    pub fn forward(&self, ctx: &Ctx, pyr: &FeaturePyramid) -> Result<Tensor> {
        if self.cfg.use_hierarchical {
            self.decode(ctx, pyr)
        } else {
            self.decode_flat(ctx, pyr)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BnMode;
    use maskarch_tensor::Tape;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    fn pyramid(rng: &mut ChaCha8Rng, tape: Option<&Tape>, hw: usize, ch: [usize; 3]) -> FeaturePyramid {
        let mut mk = |c, s| {
            let t = rand_tensor(rng, &[2, c, s, s]);
            match tape {
                Some(tape) => tape.leaf(t),
                None => t,
            }
        };
        FeaturePyramid {
            f1: mk(ch[0], hw),
            f2: mk(ch[1], hw / 2),
            f3: mk(ch[2], hw / 4),
            input_hw: (hw, hw),
        }
    }

    #[test]
    fn shapes_linearity_and_gradient_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ch = [4, 8, 16];
        for hier in [true, false] {
            let mut store = ParamStore::new();
            let cfg = DecoderConfig {
                embed_width: 6,
                use_hierarchical: hier,
            };
            let dec = Decoder::new(&mut store, &mut rng, &cfg, ch).unwrap();
            assert_eq!(dec.proj.iter().filter(|p| p.is_some()).count(), if hier { 3 } else { 1 });
            let bound = store.bind(None);
            let ctx = Ctx::new(&bound, &store, BnMode::Batch);

            let zero = FeaturePyramid {
                f1: Tensor::zeros(&[2, 4, 8, 8]),
                f2: Tensor::zeros(&[2, 8, 4, 4]),
                f3: Tensor::zeros(&[2, 16, 2, 2]),
                input_hw: (8, 8),
            };
            let out = dec.forward(&ctx, &zero).unwrap();
            assert_eq!(out.shape(), &[2, 3, 8, 8]);
            assert!(out.data().iter().all(|&v| v == 0.0));

            let pyr = pyramid(&mut rng, None, 8, ch);
            let scaled = FeaturePyramid {
                f1: pyr.f1.scale(2.5).unwrap(),
                f2: pyr.f2.scale(2.5).unwrap(),
                f3: pyr.f3.scale(2.5).unwrap(),
                input_hw: (8, 8),
            };
            let a = dec.forward(&ctx, &pyr).unwrap();
            let b = dec.forward(&ctx, &scaled).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((2.5 * x - y).abs() < 1e-4);
            }

            let tape = Tape::new();
            let pyr = pyramid(&mut rng, Some(&tape), 8, ch);
            let loss = dec.forward(&ctx, &pyr).unwrap().mul(&rand_tensor(&mut rng, &[2, 3, 8, 8])).unwrap().sum();
            let g = tape.backward(&loss).unwrap();
            let norm = |t: &Tensor| g.get(t).map_or(0.0, |v| v.iter().map(|x| x * x).sum::<f32>().sqrt());
            assert!(norm(&pyr.f3) > 1e-10);
            assert_eq!(norm(&pyr.f1) > 1e-10, hier);
            assert_eq!(norm(&pyr.f2) > 1e-10, hier);
        }
    }

    #[test]
    fn resolution_violation_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut rng, &DecoderConfig::default(), [4, 8, 16]).unwrap();
        let bound = store.bind(None);
        let ctx = Ctx::new(&bound, &store, BnMode::Batch);
        let mut pyr = pyramid(&mut rng, None, 8, [4, 8, 16]);
        pyr.f2 = Tensor::zeros(&[2, 8, 8, 8]);
        assert!(dec.decode(&ctx, &pyr).is_err());
    }
}
