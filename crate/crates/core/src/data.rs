//! Image datasets, normalization, augmentation and deterministic splits.
//!
//! Label arrays live only in [`LabeledSet`]; the search path takes an
//! [`ImageSet`] and never sees labels.

use std::fs;
use std::path::{Path, PathBuf};

use maskarch_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{rng_for, STREAM_ORDER};

pub const CHANNELS: usize = 3;

/// Unlabeled 8-bit RGB images stored planar (CHW) per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    pixels: Vec<u8>,
}

impl ImageSet {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        let per = CHANNELS * height * width;
        if per == 0 || !pixels.len().is_multiple_of(per) {
            return Err(Error::Dataset(format!(
                "{} bytes do not form whole {height}x{width} RGB images",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageSet {
            height: self.height,
            width: self.width,
            pixels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: ImageSet,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(images: ImageSet, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != images.len() {
            return Err(Error::Dataset(format!(
                "{} labels for {} images",
                labels.len(),
                images.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            images: self.images.subset(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` images (all when `n` exceeds the set size).
    pub fn take(&self, n: usize) -> LabeledSet {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn cifar_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn read_cifar_files(files: &[PathBuf]) -> Result<LabeledSet> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Dataset(format!(
                "{} is not a CIFAR-10 binary batch ({} bytes)",
                f.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    LabeledSet::new(ImageSet::new(32, 32, pixels)?, labels, 10)
}

/// Reads the CIFAR-10 binary training batches (`data_batch_{1..5}.bin`)
/// from `root` or `root/cifar-10-batches-bin`.
pub fn load_cifar10_train(root: &Path) -> Result<LabeledSet> {
    let dir = cifar_dir(root);
    let files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    if let Some(missing) = files.iter().find(|f| !f.is_file()) {
        return Err(Error::Dataset(format!("CIFAR-10 batch {} not found", missing.display())));
    }
    read_cifar_files(&files)
}

pub fn load_cifar10_test(root: &Path) -> Result<LabeledSet> {
    let f = cifar_dir(root).join("test_batch.bin");
    if !f.is_file() {
        return Err(Error::Dataset(format!("CIFAR-10 batch {} not found", f.display())));
    }
    read_cifar_files(&[f])
}

/// Procedurally generated labeled images: each class is an oriented
/// sinusoidal grating with a class-specific frequency and colour bias,
/// random phase, contrast, a random blob and pixel noise. Used for tests and
/// for offline smoke runs.
pub fn synthetic(n: usize, num_classes: usize, size: usize, seed: u64) -> Result<LabeledSet> {
    if num_classes == 0 || size == 0 {
        return Err(Error::Dataset("synthetic set needs classes and a positive size".into()));
    }
    let mut rng = rng_for(seed, &[0x5157]);
    let hw = size * size;
    let mut pixels = vec![0u8; n * CHANNELS * hw];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = rng.random_range(0..num_classes);
        labels.push(class);
        let angle = std::f32::consts::PI * (class % 5) as f32 / 5.0 + rng.random_range(-0.15..0.15);
        let freq = 2.0 + 2.0 * (class / 5) as f32 + rng.random_range(-0.3..0.3);
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let contrast = rng.random_range(0.5..1.0);
        let tint = [
            0.5 + 0.3 * ((class as f32 * 1.3).sin()),
            0.5 + 0.3 * ((class as f32 * 2.1).cos()),
            0.5 + 0.3 * ((class as f32 * 0.7 + 1.0).sin()),
        ];
        let (bx, by) = (rng.random_range(0.0..1.0f32), rng.random_range(0.0..1.0f32));
        let br = rng.random_range(0.1..0.25f32);
        let bcol: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let (ca, sa) = (angle.cos(), angle.sin());
        let img = &mut pixels[i * CHANNELS * hw..(i + 1) * CHANNELS * hw];
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f32 / size as f32, y as f32 / size as f32);
                let g = (std::f32::consts::TAU * freq * (u * ca + v * sa) + phase).sin();
                let in_blob = (u - bx).powi(2) + (v - by).powi(2) < br * br;
                for c in 0..CHANNELS {
                    let mut val = tint[c] + 0.35 * contrast * g;
                    if in_blob {
                        val = 0.5 * val + 0.5 * bcol[c];
                    }
                    val += rng.random_range(-0.06..0.06);
                    img[c * hw + y * size + x] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    LabeledSet::new(ImageSet::new(size, size, pixels)?, labels, num_classes)
}

/// Per-channel standardization of `[0, 1]`-scaled pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalizer {
    pub const CIFAR10: Normalizer = Normalizer {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2470, 0.2435, 0.2616],
    };

    pub fn fit(set: &ImageSet) -> Normalizer {
        let hw = set.height * set.width;
        let mut mean = [0.0f32; 3];
        let mut std = [0.0f32; 3];
        for c in 0..CHANNELS {
            let (mut s, mut ss, mut n) = (0.0f64, 0.0f64, 0usize);
            for i in 0..set.len() {
                for &p in &set.image(i)[c * hw..(c + 1) * hw] {
                    let v = p as f64 / 255.0;
                    s += v;
                    ss += v * v;
                    n += 1;
                }
            }
            let m = s / n.max(1) as f64;
            mean[c] = m as f32;
            std[c] = ((ss / n.max(1) as f64 - m * m).max(1e-8)).sqrt() as f32;
        }
        Normalizer { mean, std }
    }

    fn apply(&self, c: usize, p: u8) -> f32 {
        (p as f32 / 255.0 - self.mean[c]) / self.std[c]
    }
}

/// Training-time augmentation: padded random crop, horizontal flip and
/// optional cutout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    pub crop_padding: usize,
    pub flip: bool,
    pub cutout: usize,
}

impl Augment {
    pub const NONE: Augment = Augment {
        crop_padding: 0,
        flip: false,
        cutout: 0,
    };
}

/// Builds a normalized `[n, 3, H, W]` batch of the images at `indices`.
/// Augmentation randomness is drawn from `rng` only when `augment` is given.
pub fn make_batch(
    set: &ImageSet,
    indices: &[usize],
    norm: &Normalizer,
    augment: Option<(&Augment, &mut dyn rand::RngCore)>,
) -> Tensor {
    let (h, w) = (set.height, set.width);
    let hw = h * w;
    let mut out = vec![0.0f32; indices.len() * CHANNELS * hw];
    let mut augment = augment;
    for (b, &idx) in indices.iter().enumerate() {
        let img = set.image(idx);
        let dst = &mut out[b * CHANNELS * hw..(b + 1) * CHANNELS * hw];
        let (mut dy, mut dx, mut flip, mut cut) = (0isize, 0isize, false, None);
        if let Some((aug, rng)) = augment.as_mut() {
            let p = aug.crop_padding as isize;
            if p > 0 {
                dy = rng.random_range(-(p as i64)..=p as i64) as isize;
                dx = rng.random_range(-(p as i64)..=p as i64) as isize;
            }
            flip = aug.flip && rng.random_bool(0.5);
            if aug.cutout > 0 {
                cut = Some((rng.random_range(0..h), rng.random_range(0..w), aug.cutout));
            }
        }
        for c in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    let p = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        img[c * hw + sy as usize * w + sx as usize]
                    } else {
                        0
                    };
                    dst[c * hw + y * w + x] = norm.apply(c, p);
                }
            }
        }
        if let Some((cy, cx, len)) = cut {
            let half = len / 2;
            for c in 0..CHANNELS {
                for y in cy.saturating_sub(half)..(cy + len - half).min(h) {
                    for x in cx.saturating_sub(half)..(cx + len - half).min(w) {
                        dst[c * hw + y * w + x] = 0.0;
                    }
                }
            }
        }
    }
    Tensor::from_vec(out, &[indices.len(), CHANNELS, h, w]).expect("batch shape matches buffer")
}

/// Deterministic disjoint split of `0..n`; the first part holds
/// `round(fraction · n)` indices.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &[0x5917]));
    let cut = ((fraction * n as f64).round() as usize).min(n);
    let val = idx.split_off(cut);
    (idx, val)
}

/// Per-epoch shuffled visiting order, keyed by (seed, epoch, split).
pub fn epoch_order(indices: &[usize], seed: u64, epoch: u64, split: u64) -> Vec<usize> {
    let mut order = indices.to_vec();
    order.shuffle(&mut rng_for(seed, &[STREAM_ORDER, epoch, split]));
    order
}
