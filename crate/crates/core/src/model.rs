//! The masked autoencoder: supernet encoder, reconstruction decoder and
//! mask embedding sharing one parameter store.

use maskarch_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, ImageSet, Normalizer};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::Result;
use crate::masking::{apply_mask, generate_mask, MaskSpec, PatchMask};
use crate::network::{Mixing, Network};
use crate::nn::{BnMode, Calibration, Ctx, ParamGroup, ParamId, ParamStore};
use crate::objective::{masked_l1_loss, per_image_masked_l1, score_from_losses, MaskedLoss};
use crate::search_space::SearchSpace;
use crate::seeding::{derive_seed, rng_for, STREAM_INIT, STREAM_SCORE_MASK};
use crate::supernet::{build_supernet, forward_features, SupernetConfig};

/// What masked pixels are replaced with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    /// A learnable per-channel vector, initialized to zero (the dataset mean
    /// after standardization).
    #[default]
    Embedding,
    /// Constant zero.
    Zero,
}

#[derive(Clone, Debug)]
pub struct MaskedModel {
    pub store: ParamStore,
    pub encoder: Network,
    pub decoder: Decoder,
    pub mask_token: Option<ParamId>,
}

impl MaskedModel {
    pub fn new(supernet: &SupernetConfig, decoder: &DecoderConfig, fill: MaskFill, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, &[STREAM_INIT]);
        let mut store = ParamStore::new();
        let encoder = build_supernet(&mut store, &mut rng, supernet)?;
        let decoder = Decoder::new(&mut store, &mut rng, decoder, encoder.tap_channels())?;
        let mask_token = match fill {
            MaskFill::Embedding => Some(store.constant("mask_token", ParamGroup::MaskToken, &[3], 0.0)),
            MaskFill::Zero => None,
        };
        Ok(Self {
            store,
            encoder,
            decoder,
            mask_token,
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.encoder.space
    }

    fn fill(&self, ctx: &Ctx) -> Tensor {
        match self.mask_token {
            Some(id) => ctx.p(id).clone(),
            None => Tensor::zeros(&[3]),
        }
    }

    /// Masks `batch`, encodes, decodes and returns the reconstruction.
    pub fn reconstruct(&self, ctx: &Ctx, batch: &Tensor, masks: &[PatchMask], mixing: &Mixing) -> Result<(Tensor, Vec<bool>)> {
        let masked = apply_mask(batch, masks, &self.fill(ctx))?;
        let pyr = forward_features(&self.encoder, ctx, &masked.images, mixing)?;
        let pred = self.decoder.forward(ctx, &pyr)?;
        Ok((pred, masked.pixel_mask))
    }

    pub fn loss(&self, ctx: &Ctx, batch: &Tensor, masks: &[PatchMask], mixing: &Mixing) -> Result<MaskedLoss> {
        let (pred, pixel_mask) = self.reconstruct(ctx, batch, masks, mixing)?;
        masked_l1_loss(&pred, batch, &pixel_mask)
    }
}

/// Scoring set-up shared by every model evaluated in one comparison.
#[derive(Clone, Debug)]
pub struct ScoreSetup<'a> {
    pub images: &'a ImageSet,
    pub normalizer: Normalizer,
    pub mask: MaskSpec,
    pub mask_seed: u64,
    pub batch_size: usize,
}

impl ScoreSetup<'_> {
    /// The scoring mask of image `i`, identical for every model.
    pub fn mask_for(&self, i: usize) -> Result<PatchMask> {
        generate_mask(&self.mask, derive_seed(self.mask_seed, &[STREAM_SCORE_MASK, i as u64]))
    }

    fn batches(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        let n = self.images.len();
        let bs = self.batch_size.max(1);
        (0..n.div_ceil(bs)).map(move |b| (b * bs..((b + 1) * bs).min(n)).collect())
    }
}

/// Re-estimates batch-norm running statistics for `mixing` as the
/// equal-weight average over the scoring batches.
pub fn calibrate_bn(model: &mut MaskedModel, mixing: &Mixing, setup: &ScoreSetup) -> Result<()> {
    let mut cal = Calibration::default();
    {
        let bound = model.store.bind(None);
        for idx in setup.batches() {
            let ctx = Ctx::new(&bound, &model.store, BnMode::Batch);
            let batch = make_batch(setup.images, &idx, &setup.normalizer, None);
            let masks = idx.iter().map(|&i| setup.mask_for(i)).collect::<Result<Vec<_>>>()?;
            model.reconstruct(&ctx, &batch, &masks, mixing)?;
            cal.add(&ctx.take_observed());
        }
    }
    cal.apply(&mut model.store);
    Ok(())
}

/// Per-image masked losses using running batch-norm statistics, so the
/// result does not depend on how images are batched.
pub fn per_image_losses(model: &MaskedModel, mixing: &Mixing, setup: &ScoreSetup) -> Result<Vec<f64>> {
    let bound = model.store.bind(None);
    let ctx = Ctx::new(&bound, &model.store, BnMode::Running);
    let mut losses = Vec::with_capacity(setup.images.len());
    for idx in setup.batches() {
        let batch = make_batch(setup.images, &idx, &setup.normalizer, None);
        let masks = idx.iter().map(|&i| setup.mask_for(i)).collect::<Result<Vec<_>>>()?;
        let (pred, pixel_mask) = model.reconstruct(&ctx, &batch, &masks, mixing)?;
        losses.extend(per_image_masked_l1(&pred, &batch, &pixel_mask)?);
    }
    Ok(losses)
}

/// `−1 ×` the mean masked l1 loss over the evaluation set.
pub fn reconstruction_score(model: &MaskedModel, mixing: &Mixing, setup: &ScoreSetup) -> Result<f64> {
    score_from_losses(&per_image_losses(model, mixing, setup)?)
}
