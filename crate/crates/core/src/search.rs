//! Alternating bilevel optimization: architecture steps on the validation
//! split, weight steps on the training split, both on the masked
//! reconstruction loss.

use maskarch_tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::collapse::skip_tally;
use crate::data::{epoch_order, make_batch, split_indices, ImageSet, Normalizer};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::masking::{generate_mask, MaskSpec, PatchMask};
use crate::model::{MaskFill, MaskedModel};
use crate::nn::{BnMode, Ctx, ParamStore};
use crate::optim::{clip_grad_norm, cosine_lr, Adam, Sgd};
use crate::search_space::{derive_genotype, ArchParams, CellKind, Genotype};
use crate::seeding::{derive_seed, rng_for, STREAM_ALPHA_INIT, STREAM_MASK_TRAIN, STREAM_MASK_VAL};
use crate::supernet::{fixed_softmax_mixing, softmax_mixing, SupernetConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    #[default]
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub w_lr: f64,
    pub w_lr_min: f64,
    pub w_momentum: f32,
    pub w_weight_decay: f32,
    pub grad_clip: f32,
    pub alpha_lr: f32,
    pub alpha_weight_decay: f32,
    pub alpha_beta1: f32,
    pub alpha_beta2: f32,
    pub mask_ratio: f64,
    pub patch_size: usize,
    pub mask_fill: MaskFill,
    /// Fraction of the search images used for weight steps; the rest drive
    /// architecture steps.
    pub split_fraction: f64,
    pub order: Order,
    pub seed: u64,
    /// Stop after this many iterations in total (for smoke runs).
    pub max_steps: Option<u64>,
    /// Also checkpoint every this many iterations (0 = only at epoch ends).
    pub checkpoint_every: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 64,
            w_lr: 0.025,
            w_lr_min: 0.001,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            grad_clip: 5.0,
            alpha_lr: 3e-4,
            alpha_weight_decay: 1e-3,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            mask_ratio: 0.5,
            patch_size: 4,
            mask_fill: MaskFill::Embedding,
            split_fraction: 0.5,
            order: Order::First,
            seed: 0,
            max_steps: None,
            checkpoint_every: 0,
        }
    }
}

impl SearchConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push("search.batch_size must be positive".into());
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            p.push(format!("search.split_fraction {} must lie in (0, 1)", self.split_fraction));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            p.push(format!("search.mask_ratio {} must lie in [0, 1]", self.mask_ratio));
        }
        if self.patch_size == 0 {
            p.push("search.patch_size must be positive".into());
        }
        for (name, v) in [("search.w_lr", self.w_lr), ("search.w_lr_min", self.w_lr_min)] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{name} must be a finite non-negative number"));
            }
        }
        if !(self.alpha_lr >= 0.0 && self.alpha_lr.is_finite()) {
            p.push("search.alpha_lr must be a finite non-negative number".into());
        }
        for (name, b) in [("search.alpha_beta1", self.alpha_beta1), ("search.alpha_beta2", self.alpha_beta2)] {
            if !(0.0..1.0).contains(&b) {
                p.push(format!("{name} must lie in [0, 1)"));
            }
        }
        p
    }
}

/// Everything needed to build and drive one search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSetup {
    pub supernet: SupernetConfig,
    pub decoder: DecoderConfig,
    pub search: SearchConfig,
}

#[derive(Clone, Debug)]
pub struct SearchState {
    pub model: MaskedModel,
    pub arch: ArchParams,
    pub w_opt: Sgd,
    pub a_opt: Adam,
    /// Iterations completed.
    pub step: u64,
}

impl SearchState {
    pub fn new(setup: &SearchSetup) -> Result<Self> {
        let cfg = &setup.search;
        let model = MaskedModel::new(&setup.supernet, &setup.decoder, cfg.mask_fill, cfg.seed)?;
        let arch = ArchParams::random(model.space(), &mut rng_for(cfg.seed, &[STREAM_ALPHA_INIT]));
        let sizes: Vec<usize> = model.store.params().iter().map(|p| p.value.len()).collect();
        let a_sizes: Vec<usize> = arch.matrices().map(|m| m.values.len()).collect();
        Ok(Self {
            w_opt: Sgd::new(cfg.w_momentum, cfg.w_weight_decay, &sizes),
            a_opt: Adam::new(cfg.alpha_beta1, cfg.alpha_beta2, cfg.alpha_weight_decay, &a_sizes),
            model,
            arch,
            step: 0,
        })
    }

    pub fn genotype(&self) -> Result<Genotype> {
        derive_genotype(&self.arch, self.model.space())
    }
}

/// Result of one forward/backward pass.
struct Grads {
    loss: f32,
    w: Option<Vec<Vec<f32>>>,
    alpha: Option<Vec<Vec<f32>>>,
}

fn compute_grads(
    model: &MaskedModel,
    store: &ParamStore,
    arch: &ArchParams,
    batch: &Tensor,
    masks: &[PatchMask],
    want_w: bool,
    want_alpha: bool,
) -> Result<Grads> {
    let tape = Tape::new();
    let bound = store.bind(want_w.then_some(&tape));
    let alpha_leaves: Vec<Tensor> = if want_alpha {
        arch.matrices()
            .map(|m| tape.leaf(Tensor::from_vec(m.values.clone(), &[m.edges, m.ops]).expect("alpha shape")))
            .collect()
    } else {
        Vec::new()
    };
    let mixing = if want_alpha {
        softmax_mixing(&alpha_leaves[0], alpha_leaves.get(1))?
    } else {
        fixed_softmax_mixing(arch)
    };
    let ctx = Ctx::new(&bound, store, BnMode::Batch);
    let loss = model.loss(&ctx, batch, masks, &mixing)?;
    let value = loss.item();
    if !value.is_finite() || !(want_w || want_alpha) {
        return Ok(Grads {
            loss: value,
            w: None,
            alpha: None,
        });
    }
    let mut g = tape.backward(&loss.value)?;
    let w = want_w.then(|| bound.iter().map(|t| g.take(t).unwrap_or_else(|| vec![0.0; t.len()])).collect());
    let alpha = want_alpha.then(|| {
        alpha_leaves
            .iter()
            .map(|t| g.take(t).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    });
    Ok(Grads { loss: value, w, alpha })
}

fn diverged(phase: &'static str, step: u64, detail: impl Into<String>) -> Error {
    Error::Divergence {
        phase,
        step,
        detail: detail.into(),
    }
}

/// One momentum-SGD step on the weights (α untouched). Returns the loss
/// before the update.
pub fn weight_step(state: &mut SearchState, cfg: &SearchConfig, batch: &Tensor, masks: &[PatchMask], lr: f32) -> Result<f32> {
    let g = compute_grads(&state.model, &state.model.store, &state.arch, batch, masks, true, false)?;
    if !g.loss.is_finite() {
        return Err(diverged("weight step", state.step, format!("training loss is {}", g.loss)));
    }
    let mut grads = g.w.expect("requested weight gradients");
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(diverged("weight step", state.step, "non-finite weight gradient"));
    }
    clip_grad_norm(&mut grads, cfg.grad_clip);
    let n = state.model.store.len();
    for i in 0..n {
        let id = crate::nn::ParamId(i);
        let w = state.model.store.value_mut(id);
        state.w_opt.step(i, w, &grads[i], lr);
    }
    if !state.model.store.all_finite() {
        return Err(diverged("weight step", state.step, "weights became non-finite"));
    }
    Ok(g.loss)
}

fn apply_alpha_grads(state: &mut SearchState, cfg: &SearchConfig, grads: &[Vec<f32>]) -> Result<()> {
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(diverged("architecture step", state.step, "non-finite architecture gradient"));
    }
    state.a_opt.begin_step();
    for (i, m) in state.arch.matrices_mut().enumerate() {
        state.a_opt.update(i, &mut m.values, &grads[i], cfg.alpha_lr);
    }
    if !state.arch.is_finite() {
        return Err(diverged("architecture step", state.step, "architecture parameters became non-finite"));
    }
    Ok(())
}

/// First-order architecture step: one Adam step on α with the weights
/// held fixed. Returns the validation loss before the update.
pub fn alpha_step(state: &mut SearchState, cfg: &SearchConfig, val_batch: &Tensor, val_masks: &[PatchMask]) -> Result<f32> {
    let g = compute_grads(&state.model, &state.model.store, &state.arch, val_batch, val_masks, false, true)?;
    if !g.loss.is_finite() {
        return Err(diverged("architecture step", state.step, format!("validation loss is {}", g.loss)));
    }
    apply_alpha_grads(state, cfg, &g.alpha.expect("requested architecture gradients"))?;
    Ok(g.loss)
}

fn perturbed(store: &ParamStore, base: &[Vec<f32>], dir: &[Vec<f32>], scale: f32) -> ParamStore {
    let mut s = store.clone();
    for (i, (b, d)) in base.iter().zip(dir).enumerate() {
        let v = s.value_mut(crate::nn::ParamId(i));
        for k in 0..v.len() {
            v[k] = b[k] + scale * d[k];
        }
    }
    s
}

/// Unrolled architecture step: the validation gradient is taken at the
/// weights after one virtual SGD step, with the second-order term
/// approximated by central finite differences.
pub fn alpha_step_second_order(
    state: &mut SearchState,
    cfg: &SearchConfig,
    train: (&Tensor, &[PatchMask]),
    val: (&Tensor, &[PatchMask]),
    w_lr: f32,
) -> Result<f32> {
    let model = &state.model;
    let store = &model.store;
    let w: Vec<Vec<f32>> = store.params().iter().map(|p| p.value.to_vec()).collect();
    let gt = compute_grads(model, store, &state.arch, train.0, train.1, true, false)?;
    let gtw = gt
        .w
        .ok_or_else(|| diverged("architecture step", state.step, "non-finite unrolled training loss"))?;
    let mut unrolled = store.clone();
    for (i, wi) in w.iter().enumerate() {
        let buf = &state.w_opt.buffers[i];
        let v = unrolled.value_mut(crate::nn::ParamId(i));
        for k in 0..v.len() {
            let d = cfg.w_momentum * buf[k] + gtw[i][k] + cfg.w_weight_decay * wi[k];
            v[k] = wi[k] - w_lr * d;
        }
    }
    let gv = compute_grads(model, &unrolled, &state.arch, val.0, val.1, true, true)?;
    if !gv.loss.is_finite() {
        return Err(diverged("architecture step", state.step, format!("validation loss is {}", gv.loss)));
    }
    let dw = gv.w.expect("requested");
    let mut dalpha = gv.alpha.expect("requested");
    let norm = dw.iter().flatten().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32;
    if norm > 0.0 {
        let r = 0.01 / norm;
        let plus = perturbed(store, &w, &dw, r);
        let minus = perturbed(store, &w, &dw, -r);
        let gp = compute_grads(model, &plus, &state.arch, train.0, train.1, false, true)?;
        let gm = compute_grads(model, &minus, &state.arch, train.0, train.1, false, true)?;
        let (gp, gm) = match (gp.alpha, gm.alpha) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(diverged("architecture step", state.step, "non-finite finite-difference loss")),
        };
        for i in 0..dalpha.len() {
            for k in 0..dalpha[i].len() {
                dalpha[i][k] -= w_lr * (gp[i][k] - gm[i][k]) / (2.0 * r);
            }
        }
    }
    apply_alpha_grads(state, cfg, &dalpha)?;
    Ok(gv.loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub train_loss: f32,
    pub val_loss: f32,
    pub skip_count_snapshot: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSnapshot {
    pub step: u64,
    pub epoch: u64,
    pub arch: ArchParams,
}

pub enum SearchEvent<'a> {
    Step(&'a SearchState, &'a StepMetrics),
    /// After the final iteration of an epoch (`epoch` is the finished one).
    EpochEnd(&'a SearchState, &'a AlphaSnapshot),
}

/// Images and the fixed split used by a search.
pub struct SearchData<'a> {
    pub images: &'a ImageSet,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub normalizer: Normalizer,
    pub mask: MaskSpec,
}

impl<'a> SearchData<'a> {
    pub fn new(images: &'a ImageSet, cfg: &SearchConfig) -> Result<Self> {
        let (train, val) = split_indices(images.len(), cfg.split_fraction, cfg.seed);
        if train.len() < cfg.batch_size || val.len() < cfg.batch_size {
            return Err(Error::Validation(vec![format!(
                "split of {} images gives {} train / {} val, fewer than one batch of {}",
                images.len(),
                train.len(),
                val.len(),
                cfg.batch_size
            )]));
        }
        let mask = MaskSpec::new(images.height, images.width, cfg.patch_size, cfg.mask_ratio)?;
        if mask.masked_count() == 0 {
            return Err(Error::Validation(vec![format!(
                "mask_ratio {} masks no patch of the {} available; the loss would be undefined",
                cfg.mask_ratio,
                mask.num_patches()
            )]));
        }
        Ok(Self {
            images,
            train,
            val,
            normalizer: Normalizer::fit(images),
            mask,
        })
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> u64 {
        (self.train.len().min(self.val.len()) / batch_size) as u64
    }

    /// Batch and masks for iteration `step` on split 0 (train) or 1 (val).
    pub fn batch(&self, cfg: &SearchConfig, step: u64, split: u64) -> Result<(Tensor, Vec<PatchMask>)> {
        let spe = self.steps_per_epoch(cfg.batch_size);
        let (epoch, b) = (step / spe, (step % spe) as usize);
        let pool = if split == 0 { &self.train } else { &self.val };
        let order = epoch_order(pool, cfg.seed, epoch, split);
        let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
        let stream = if split == 0 { STREAM_MASK_TRAIN } else { STREAM_MASK_VAL };
        let masks = (0..idx.len())
            .map(|j| generate_mask(&self.mask, derive_seed(cfg.seed, &[stream, step, j as u64])))
            .collect::<Result<Vec<_>>>()?;
        Ok((make_batch(self.images, idx, &self.normalizer, None), masks))
    }
}

pub struct SearchOutput {
    pub state: SearchState,
    pub genotype: Genotype,
    /// Metrics of the iterations run by this call.
    pub metrics: Vec<StepMetrics>,
}

pub fn total_steps(cfg: &SearchConfig, spe: u64) -> u64 {
    let full = cfg.epochs * spe;
    cfg.max_steps.map_or(full, |m| m.min(full))
}

/// Runs (or continues) a search. Only unlabeled images are accepted.
pub fn run_search(
    setup: &SearchSetup,
    images: &ImageSet,
    resume: Option<SearchState>,
    on_event: &mut dyn FnMut(SearchEvent) -> Result<()>,
) -> Result<SearchOutput> {
    let cfg = &setup.search;
    let problems: Vec<String> = cfg.problems().into_iter().chain(setup.supernet.problems()).collect();
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let data = SearchData::new(images, cfg)?;
    let spe = data.steps_per_epoch(cfg.batch_size);
    let mut state = match resume {
        Some(s) => s,
        None => SearchState::new(setup)?,
    };
    let total = total_steps(cfg, spe);
    let mut metrics = Vec::new();
    if state.step == 0 {
        let snap = AlphaSnapshot {
            step: 0,
            epoch: 0,
            arch: state.arch.clone(),
        };
        on_event(SearchEvent::EpochEnd(&state, &snap))?;
    }
    while state.step < total {
        let k = state.step;
        let epoch = k / spe;
        let lr = cosine_lr(cfg.w_lr, cfg.w_lr_min, epoch, cfg.epochs);
        let (tb, tm) = data.batch(cfg, k, 0)?;
        let (vb, vm) = data.batch(cfg, k, 1)?;
        let val_loss = match cfg.order {
            Order::First => alpha_step(&mut state, cfg, &vb, &vm)?,
            Order::Second => alpha_step_second_order(&mut state, cfg, (&tb, &tm), (&vb, &vm), lr as f32)?,
        };
        let train_loss = weight_step(&mut state, cfg, &tb, &tm, lr as f32)?;
        state.step += 1;
        let g = state.genotype()?;
        let m = StepMetrics {
            step: k,
            epoch,
            train_loss,
            val_loss,
            skip_count_snapshot: skip_tally(&g, CellKind::Normal),
            lr,
        };
        on_event(SearchEvent::Step(&state, &m))?;
        metrics.push(m);
        if state.step % spe == 0 {
            let snap = AlphaSnapshot {
                step: state.step,
                epoch: epoch + 1,
                arch: state.arch.clone(),
            };
            on_event(SearchEvent::EpochEnd(&state, &snap))?;
        }
    }
    let genotype = state.genotype()?;
    Ok(SearchOutput {
        state,
        genotype,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;
    use crate::search_space::{OpSet, Topology};

    pub(crate) fn tiny_setup() -> SearchSetup {
        SearchSetup {
            supernet: SupernetConfig {
                topology: Topology::Darts,
                num_cells: 5,
                init_channels: 4,
                num_nodes: 4,
                op_set: OpSet::darts(),
                reduction_positions: None,
                stem_multiplier: None,
            },
            decoder: DecoderConfig {
                embed_width: 8,
                use_hierarchical: true,
            },
            search: SearchConfig {
                epochs: 2,
                batch_size: 4,
                seed: 3,
                ..SearchConfig::default()
            },
        }
    }

    fn images() -> ImageSet {
        synthetic(16, 4, 16, 1).unwrap().images
    }

    #[test]
    fn tiny_search_is_deterministic_and_moves_alpha() {
        let setup = tiny_setup();
        let imgs = images();
        let mut epochs = 0;
        let a = run_search(&setup, &imgs, None, &mut |e| {
            if let SearchEvent::EpochEnd(..) = e {
                epochs += 1;
            }
            Ok(())
        })
        .unwrap();
        let b = run_search(&setup, &imgs, None, &mut |_| Ok(())).unwrap();
        assert_eq!(epochs, 3);
        assert_eq!(a.state.step, 4);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.state.arch, b.state.arch);
        assert_eq!(a.genotype.hash(), b.genotype.hash());
        let init = SearchState::new(&setup).unwrap();
        assert_ne!(init.arch, a.state.arch);
        assert!(a.metrics.iter().all(|m| m.train_loss.is_finite() && m.val_loss.is_finite()));
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let setup = tiny_setup();
        let imgs = images();
        let state = SearchState::new(&setup).unwrap();
        let data = SearchData::new(&imgs, &setup.search).unwrap();
        let (batch, masks) = data.batch(&setup.search, 0, 1).unwrap();
        let store = &state.model.store;
        let g = compute_grads(&state.model, store, &state.arch, &batch, &masks, false, true).unwrap();
        let ga = g.alpha.unwrap();
        let loss_at = |arch: &ArchParams| -> f64 {
            compute_grads(&state.model, store, arch, &batch, &masks, false, false).unwrap().loss as f64
        };
        let h = 1e-2f32;
        for (e, o) in [(0usize, 3usize), (5, 4), (13, 1)] {
            let k = e * 8 + o;
            let mut p = state.arch.clone();
            p.normal.values[k] += h;
            let mut m = state.arch.clone();
            m.normal.values[k] -= h;
            let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * h as f64);
            let an = ga[0][k] as f64;
            assert!((fd - an).abs() < 2e-3 + 0.05 * an.abs(), "edge {e} op {o}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn second_order_step_runs_and_differs_from_first_order() {
        let mut setup = tiny_setup();
        setup.search.max_steps = Some(1);
        let imgs = images();
        let first = run_search(&setup, &imgs, None, &mut |_| Ok(())).unwrap();
        setup.search.order = Order::Second;
        let second = run_search(&setup, &imgs, None, &mut |_| Ok(())).unwrap();
        assert!(second.state.arch.is_finite());
        assert_ne!(first.state.arch, second.state.arch);
    }

    #[test]
    fn undersized_split_is_rejected() {
        let mut setup = tiny_setup();
        setup.search.batch_size = 64;
        let err = run_search(&setup, &images(), None, &mut |_| Ok(())).err().unwrap();
        assert!(matches!(err, Error::Validation(_)));
    }
}
