//! Masked-pixel l1 loss and the reconstruction score.

use maskarch_tensor::{Tensor, TensorError};
use serde::Serialize;

use crate::error::{Error, Result};

pub struct MaskedLoss {
    /// Scalar loss; tracked when the prediction is.
    pub value: Tensor,
    /// Number of masked pixel-channel elements.
    pub count: usize,
}

impl MaskedLoss {
    pub fn item(&self) -> f32 {
        self.value.data()[0]
    }
}

/// Mean absolute error over masked pixel-channel elements only.
pub fn masked_l1_loss(pred: &Tensor, target: &Tensor, pixel_mask: &[bool]) -> Result<MaskedLoss> {
    if pred.shape() != target.shape() {
        return Err(Error::Usage(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    match pred.masked_l1(target.data(), pixel_mask) {
        Ok((value, count)) => Ok(MaskedLoss { value, count }),
        Err(TensorError::Empty(_)) => Err(Error::Mask("loss is undefined: no element is masked".into())),
        Err(e) => Err(e.into()),
    }
}

/// Per-image masked l1 losses (no gradient), accumulated in `f64`.
pub fn per_image_masked_l1(pred: &Tensor, target: &Tensor, pixel_mask: &[bool]) -> Result<Vec<f64>> {
    let (n, c, h, w) = pred.dims4()?;
    if target.shape() != pred.shape() || pixel_mask.len() != n * h * w {
        return Err(Error::Usage("prediction, target and mask disagree in shape".into()));
    }
    let hw = h * w;
    let (p, t) = (pred.data(), target.data());
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let m = &pixel_mask[s * hw..(s + 1) * hw];
        let count = m.iter().filter(|&&v| v).count() * c;
        if count == 0 {
            return Err(Error::Mask(format!("image {s} has no masked element")));
        }
        let mut acc = 0.0f64;
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            for (k, &masked) in m.iter().enumerate() {
                if masked {
                    acc += (p[off + k] as f64 - t[off + k] as f64).abs();
                }
            }
        }
        out.push(acc / count as f64);
    }
    Ok(out)
}

/// Score of a model from its per-image losses: the negated mean.
pub fn score_from_losses(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Usage("reconstruction score needs a non-empty evaluation set".into()));
    }
    Ok(-(losses.iter().sum::<f64>() / losses.len() as f64))
}

/// One line of the score report.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ScoreRecord {
    pub model_id: String,
    pub score: f64,
    pub n_images: usize,
    pub mask_seed: u64,
}
