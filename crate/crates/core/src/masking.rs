//! Patch-aligned random masking of image batches.

use std::path::Path;

use maskarch_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub mask_ratio: f64,
}

impl MaskSpec {
    pub fn new(image_h: usize, image_w: usize, patch_size: usize, mask_ratio: f64) -> Result<Self> {
        let s = Self {
            image_h,
            image_w,
            patch_size,
            mask_ratio,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Mask(problems.join("; ")))
        }
    }

    pub(crate) fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.patch_size == 0 {
            p.push("patch_size must be positive".to_string());
        } else if !self.image_h.is_multiple_of(self.patch_size) || !self.image_w.is_multiple_of(self.patch_size) {
            p.push(format!(
                "image {}x{} is not divisible by patch_size {}",
                self.image_h, self.image_w, self.patch_size
            ));
        }
        if self.image_h == 0 || self.image_w == 0 {
            p.push("image dimensions must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            p.push(format!("mask_ratio {} is outside [0, 1]", self.mask_ratio));
        }
        p
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Number of patches every mask of this spec hides.
    pub fn masked_count(&self) -> usize {
        (self.mask_ratio * self.num_patches() as f64).round() as usize
    }
}

/// Patch grid, row-major; `true` means masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub grid: Vec<bool>,
}

impl PatchMask {
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&i| self.grid[i]).collect()
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.grid_h * self.patch_size, self.grid_w * self.patch_size)
    }

    /// Pixel-level mask of shape `(H, W)`, row-major.
    pub fn pixel_mask(&self) -> Vec<bool> {
        let (h, w) = self.image_hw();
        let p = self.patch_size;
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                out.push(self.grid[(y / p) * self.grid_w + x / p]);
            }
        }
        out
    }
}

/// Masks exactly `round(ratio · n_patches)` patches chosen uniformly
/// without replacement.
pub fn generate_mask(spec: &MaskSpec, rng_seed: u64) -> Result<PatchMask> {
    spec.validate()?;
    let (grid_h, grid_w) = spec.grid();
    let n = grid_h * grid_w;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut grid = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, spec.masked_count()) {
        grid[i] = true;
    }
    Ok(PatchMask {
        grid_h,
        grid_w,
        patch_size: spec.patch_size,
        grid,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MaskStatistics {
    pub masked_count: usize,
    pub ratio_realized: f64,
}

pub fn mask_statistics(mask: &PatchMask) -> MaskStatistics {
    let masked_count = mask.grid.iter().filter(|&&m| m).count();
    let ratio_realized = if mask.grid.is_empty() {
        0.0
    } else {
        masked_count as f64 / mask.grid.len() as f64
    };
    MaskStatistics {
        masked_count,
        ratio_realized,
    }
}

/// A masked image batch. `pixel_mask` has one entry per (sample, y, x).
pub struct MaskedBatch {
    pub images: Tensor,
    pub pixel_mask: Vec<bool>,
    pub originals: Tensor,
}

/// Replaces every masked pixel with the per-channel `embedding`. The
/// embedding may be a tracked tensor, in which case it receives gradients.
pub fn apply_mask(batch: &Tensor, masks: &[PatchMask], embedding: &Tensor) -> Result<MaskedBatch> {
    let (n, c, h, w) = batch.dims4()?;
    if masks.len() != n {
        return Err(Error::Mask(format!("{} masks for a batch of {n}", masks.len())));
    }
    let mut pixel_mask = Vec::with_capacity(n * h * w);
    for m in masks {
        if m.image_hw() != (h, w) {
            return Err(Error::Mask(format!(
                "mask covers {:?} but images are {h}x{w}",
                m.image_hw()
            )));
        }
        pixel_mask.extend(m.pixel_mask());
    }
    if embedding.shape() != [c] {
        return Err(Error::Mask(format!(
            "mask embedding has shape {:?} for {c} channels",
            embedding.shape()
        )));
    }
    let images = batch.mask_substitute(&pixel_mask, embedding)?;
    Ok(MaskedBatch {
        images,
        pixel_mask,
        originals: batch.detach(),
    })
}

#[derive(Serialize)]
struct MaskDump<'a> {
    patch_size: usize,
    ratio: f64,
    seed: u64,
    masked_patches: &'a [usize],
}

/// Writes `<stem>.png` (white = masked) and `<stem>.json`.
pub fn dump_mask(mask: &PatchMask, ratio: f64, seed: u64, dir: &Path, stem: &str) -> Result<()> {
    let (h, w) = mask.image_hw();
    let pixels: Vec<u8> = mask.pixel_mask().into_iter().map(|m| if m { 255 } else { 0 }).collect();
    let mut png_bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut png_bytes, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Mask(format!("png encoding failed: {e}")))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::Mask(format!("png encoding failed: {e}")))?;
    }
    write_atomic(&dir.join(format!("{stem}.png")), &png_bytes)?;
    let indices = mask.masked_indices();
    let json = serde_json::to_string_pretty(&MaskDump {
        patch_size: mask.patch_size,
        ratio,
        seed,
        masked_patches: &indices,
    })?;
    write_atomic(&dir.join(format!("{stem}.json")), json.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn half_of_sixty_four_patches() {
        let spec = MaskSpec::new(32, 32, 4, 0.5).unwrap();
        let m = generate_mask(&spec, 1).unwrap();
        assert_eq!(mask_statistics(&m).masked_count, 32);
        assert_eq!(mask_statistics(&m).ratio_realized, 0.5);
        let none = generate_mask(&MaskSpec::new(32, 32, 4, 0.0).unwrap(), 1).unwrap();
        assert_eq!(mask_statistics(&none).masked_count, 0);
        assert_eq!(mask_statistics(&none).ratio_realized, 0.0);
        let all = generate_mask(&MaskSpec::new(32, 32, 4, 1.0).unwrap(), 1).unwrap();
        assert_eq!(mask_statistics(&all).masked_count, 64);
        assert_eq!(mask_statistics(&all).ratio_realized, 1.0);
    }

    #[test]
    fn indivisible_dimensions_rejected() {
        assert!(MaskSpec::new(32, 30, 4, 0.5).is_err());
        assert!(MaskSpec::new(32, 32, 4, 1.5).is_err());
        assert!(MaskSpec::new(32, 32, 0, 0.5).is_err());
    }

    fn batch(n: usize, h: usize, w: usize) -> Tensor {
        let data = (0..n * 3 * h * w).map(|i| ((i * 37) % 101) as f32 / 10.0).collect();
        Tensor::from_vec(data, &[n, 3, h, w]).unwrap()
    }

    #[test]
    fn zero_ratio_is_identity_and_full_ratio_is_embedding() {
        let x = batch(2, 8, 8);
        let e = Tensor::from_vec(vec![0.5, -1.0, 2.0], &[3]).unwrap();
        let spec0 = MaskSpec::new(8, 8, 2, 0.0).unwrap();
        let m0 = vec![generate_mask(&spec0, 0).unwrap(); 2];
        assert_eq!(apply_mask(&x, &m0, &e).unwrap().images.data(), x.data());
        let spec1 = MaskSpec::new(8, 8, 2, 1.0).unwrap();
        let m1 = vec![generate_mask(&spec1, 0).unwrap(); 2];
        let out = apply_mask(&x, &m1, &e).unwrap().images;
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, e.data()[(i / 64) % 3]);
        }
    }

    #[test]
    fn half_mask_matches_per_pixel_reference() {
        let x = batch(2, 8, 8);
        let e = Tensor::from_vec(vec![0.5, -1.0, 2.0], &[3]).unwrap();
        let spec = MaskSpec::new(8, 8, 4, 0.5).unwrap();
        let masks = vec![generate_mask(&spec, 5).unwrap(), generate_mask(&spec, 6).unwrap()];
        let out = apply_mask(&x, &masks, &e).unwrap().images;
        for s in 0..2 {
            for c in 0..3 {
                for y in 0..8 {
                    for xx in 0..8 {
                        let i = ((s * 3 + c) * 8 + y) * 8 + xx;
                        let masked = masks[s].grid[(y / 4) * 2 + xx / 4];
                        let expected = if masked { e.data()[c] } else { x.data()[i] };
                        assert_eq!(out.data()[i].to_bits(), expected.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let x = batch(1, 8, 8);
        let e = Tensor::zeros(&[3]);
        let m = generate_mask(&MaskSpec::new(16, 16, 4, 0.5).unwrap(), 0).unwrap();
        assert!(apply_mask(&x, std::slice::from_ref(&m), &e).is_err());
        assert!(apply_mask(&x, &[], &e).is_err());
    }

    #[test]
    fn dump_writes_png_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let spec = MaskSpec::new(8, 8, 4, 0.5).unwrap();
        let m = generate_mask(&spec, 9).unwrap();
        dump_mask(&m, 0.5, 9, dir.path(), "mask").unwrap();
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("mask.json")).unwrap()).unwrap();
        assert_eq!(meta["masked_patches"].as_array().unwrap().len(), 2);
        let bytes = std::fs::read(dir.path().join("mask.png")).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }

    proptest! {
        #[test]
        fn masks_are_exact_aligned_and_deterministic(
            gh in 1usize..9, gw in 1usize..9, p in 1usize..6,
            ratio in 0.0f64..=1.0, seed in any::<u64>(),
        ) {
            let spec = MaskSpec::new(gh * p, gw * p, p, ratio).unwrap();
            let m = generate_mask(&spec, seed).unwrap();
            prop_assert_eq!(mask_statistics(&m).masked_count, (ratio * (gh * gw) as f64).round() as usize);
            prop_assert_eq!(&m, &generate_mask(&spec, seed).unwrap());
            let px = m.pixel_mask();
            for y in 0..gh * p {
                for x in 0..gw * p {
                    prop_assert_eq!(px[y * gw * p + x], px[(y / p * p) * gw * p + x / p * p]);
                }
            }
        }
    }
}
