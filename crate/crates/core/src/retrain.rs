//! Discrete networks built from a genotype and trained from scratch with
//! labels. This is the only place (besides micro-benchmark ground truth)
//! where labels are consumed.

use std::collections::BTreeMap;

use maskarch_tensor::{PoolKind, Tape, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_order, make_batch, Augment, LabeledSet, Normalizer};
use crate::error::{Error, Result};
use crate::network::{CellPlan, MacroConfig, Mixing, Network};
use crate::nn::{BatchNorm, BnMode, Conv, Ctx, Linear, ParamGroup, ParamStore, BN_MOMENTUM};
use crate::optim::{clip_grad_norm, cosine_lr, Sgd};
use crate::search_space::{CellKind, Genotype, SearchSpace, Topology};
use crate::seeding::{derive_seed, rng_for, STREAM_AUGMENT, STREAM_DROP_PATH, STREAM_INIT};
use crate::supernet::genotype_mixing;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    pub layers: usize,
    pub init_channels: usize,
    pub reduction_positions: Option<[usize; 2]>,
    pub stem_multiplier: Option<usize>,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub augment: Augment,
    pub drop_path: f32,
    pub auxiliary: bool,
    pub auxiliary_weight: f32,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            init_channels: 16,
            reduction_positions: None,
            stem_multiplier: None,
            epochs: 20,
            batch_size: 64,
            lr: 0.025,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            augment: Augment {
                crop_padding: 4,
                flip: true,
                cutout: 0,
            },
            drop_path: 0.0,
            auxiliary: false,
            auxiliary_weight: 0.4,
            seed: 0,
        }
    }
}

impl RetrainConfig {
    pub fn macro_config(&self, topology: Topology) -> MacroConfig {
        MacroConfig {
            num_cells: self.layers,
            init_channels: self.init_channels,
            stem_multiplier: self.stem_multiplier.unwrap_or(match topology {
                Topology::Darts => 3,
                Topology::Bench201 => 1,
            }),
            reductions: self
                .reduction_positions
                .unwrap_or_else(|| MacroConfig::default_reductions(self.layers)),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p: Vec<String> = self
            .macro_config(Topology::Darts)
            .problems()
            .into_iter()
            .map(|s| format!("retrain: {s}"))
            .collect();
        if self.batch_size == 0 {
            p.push("retrain.batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            p.push(format!("retrain.drop_path {} must lie in [0, 1)", self.drop_path));
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.lr.is_finite() && self.lr_min.is_finite()) {
            p.push("retrain.lr and retrain.lr_min must be finite and non-negative".into());
        }
        p
    }
}

/// Auxiliary classifier attached after the second reduction.
#[derive(Clone, Debug)]
struct AuxHead {
    conv: Conv,
    bn: BatchNorm,
    fc: Linear,
}

impl AuxHead {
    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, _) = x.dims4()?;
        let x = x.relu()?;
        let x = if h >= 5 { x.pool2d(PoolKind::Avg, 5, 3, 0)? } else { x };
        let x = self.bn.forward(ctx, &self.conv.forward(ctx, &x)?)?.relu()?;
        self.fc.forward(ctx, &x.global_avg_pool()?)
    }
}

/// A trainable discrete network: stem, the genotype's cells and a linear
/// classifier.
#[derive(Clone, Debug)]
pub struct DiscreteNetwork {
    pub genotype: Genotype,
    pub store: ParamStore,
    pub net: Network,
    mixing: Mixing,
    last_bn: Option<BatchNorm>,
    classifier: Linear,
    aux: Option<(usize, AuxHead)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSize {
    pub total_params: usize,
    pub params_by_group: BTreeMap<String, usize>,
    /// Multiply-accumulates of one inference pass (convolutions and linear
    /// layers; pooling and the auxiliary head are not counted).
    pub macs: u64,
}

pub const NUM_CLASSES_DEFAULT: usize = 10;

/// Builds the discrete network of a valid genotype.
pub fn build_discrete_network(
    g: &Genotype,
    space: &SearchSpace,
    cfg: &RetrainConfig,
    num_classes: usize,
) -> Result<DiscreteNetwork> {
    g.ensure_valid(space)?;
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let mut rng: ChaCha8Rng = rng_for(cfg.seed, &[STREAM_INIT]);
    let mut store = ParamStore::new();
    let plan = |kind: CellKind| {
        let spec = space
            .cell(kind)
            .ok_or_else(|| Error::SearchSpace(format!("no {kind} cell in the search space")))?;
        CellPlan::from_genotype(spec, g.cell(kind))
    };
    let macro_cfg = cfg.macro_config(space.topology());
    let net = Network::build(&mut store, &mut rng, space, &macro_cfg, &plan, false)?;
    let c_last = *net.channels.last().expect("network has layers");
    let last_bn = (space.topology() == Topology::Bench201)
        .then(|| BatchNorm::new(&mut store, "lastact.bn", ParamGroup::Head, c_last, true));
    let classifier = Linear::new(&mut store, &mut rng, "classifier", ParamGroup::Head, c_last, num_classes);
    let aux = if cfg.auxiliary {
        let at = macro_cfg.reductions[1];
        let c = net.channels[at];
        let head = AuxHead {
            conv: Conv::new(&mut store, &mut rng, "aux.conv", ParamGroup::Head, c, 128, 1, Default::default(), false),
            bn: BatchNorm::new(&mut store, "aux.bn", ParamGroup::Head, 128, true),
            fc: Linear::new(&mut store, &mut rng, "aux.fc", ParamGroup::Head, 128, num_classes),
        };
        Some((at, head))
    } else {
        None
    };
    Ok(DiscreteNetwork {
        genotype: g.clone(),
        mixing: genotype_mixing(space, g)?,
        store,
        net,
        last_bn,
        classifier,
        aux,
    })
}

impl DiscreteNetwork {
    /// Logits and, when training with an auxiliary head, auxiliary logits.
    pub fn forward(&self, ctx: &Ctx, x: &Tensor, with_aux: bool) -> Result<(Tensor, Option<Tensor>)> {
        let out = self.net.forward(ctx, x, &self.mixing)?;
        let mut last = out.layers.last().expect("network has layers").clone();
        if let Some(bn) = &self.last_bn {
            last = bn.forward(ctx, &last)?.relu()?;
        }
        let logits = self.classifier.forward(ctx, &last.global_avg_pool()?)?;
        let aux = match (&self.aux, with_aux) {
            (Some((at, head)), true) => Some(head.forward(ctx, &out.layers[*at])?),
            _ => None,
        };
        Ok((logits, aux))
    }

    pub fn size(&self, input_hw: (usize, usize)) -> Result<ModelSize> {
        let mut by_group = BTreeMap::new();
        for p in self.store.params() {
            *by_group.entry(format!("{:?}", p.group).to_lowercase()).or_insert(0) += p.value.len();
        }
        let bound = self.store.bind(None);
        let ctx = Ctx::new(&bound, &self.store, BnMode::Running);
        self.forward(&ctx, &Tensor::zeros(&[1, 3, input_hw.0, input_hw.1]), false)?;
        Ok(ModelSize {
            total_params: self.store.num_elements(),
            params_by_group: by_group,
            macs: ctx.macs(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainResult {
    pub genotype_hash: String,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub size: ModelSize,
    pub curve: Vec<EpochRecord>,
    pub flags: RetrainFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainFlags {
    pub auxiliary: bool,
    pub drop_path: f32,
    pub cutout: usize,
    pub epochs: u64,
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 == l
        })
        .count()
}

/// Top-1 accuracy with running batch-norm statistics.
pub fn evaluate(model: &DiscreteNetwork, set: &LabeledSet, norm: &Normalizer, batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let bound = model.store.bind(None);
    let ctx = Ctx::new(&bound, &model.store, BnMode::Running);
    let mut hits = 0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = make_batch(&set.images, chunk, norm, None);
        let (logits, _) = model.forward(&ctx, &x, false)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
        hits += correct(&logits, &labels);
    }
    Ok(hits as f64 / set.len() as f64)
}

/// Trains `model` with momentum SGD and a cosine schedule, evaluating on
/// `test` after every epoch.
pub fn train_from_scratch(
    model: &mut DiscreteNetwork,
    train: &LabeledSet,
    test: &LabeledSet,
    cfg: &RetrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RetrainResult> {
    if train.len() < cfg.batch_size {
        return Err(Error::Dataset(format!(
            "training set of {} images is smaller than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let hw = (train.images.height, train.images.width);
    let size = model.size(hw)?;
    let norm = Normalizer::fit(&train.images);
    let sizes: Vec<usize> = model.store.params().iter().map(|p| p.value.len()).collect();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay, &sizes);
    let all: Vec<usize> = (0..train.len()).collect();
    let steps = train.len() / cfg.batch_size;
    let mut curve = Vec::new();
    let mut best = 0.0f64;
    let mut last = evaluate(model, test, &norm, 256)?;
    if cfg.epochs == 0 {
        best = last;
    }
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, cfg.lr_min, epoch, cfg.epochs);
        let drop_prob = cfg.drop_path * epoch as f32 / cfg.epochs as f32;
        let order = epoch_order(&all, cfg.seed, epoch, 0);
        let mut aug_rng = rng_for(cfg.seed, &[STREAM_AUGMENT, epoch]);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for b in 0..steps {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let x = make_batch(&train.images, idx, &norm, Some((&cfg.augment, &mut aug_rng)));
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let tape = Tape::new();
            let bound = model.store.bind(Some(&tape));
            let ctx = Ctx::new(&bound, &model.store, BnMode::Batch).with_drop_path(
                drop_prob,
                rng_for(derive_seed(cfg.seed, &[STREAM_DROP_PATH, epoch]), &[b as u64]),
            );
            let (logits, aux) = model.forward(&ctx, &x, true)?;
            let mut loss = logits.cross_entropy(&labels)?;
            if let Some(aux) = aux {
                loss = loss.add(&aux.cross_entropy(&labels)?.scale(cfg.auxiliary_weight)?)?;
            }
            let value = loss.data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    phase: "retrain",
                    step: epoch * steps as u64 + b as u64,
                    detail: format!("training loss is {value}"),
                });
            }
            loss_sum += value as f64;
            hits += correct(&logits, &labels);
            let mut g = tape.backward(&loss)?;
            let mut grads: Vec<Vec<f32>> = bound.iter().map(|t| g.take(t).unwrap_or_else(|| vec![0.0; t.len()])).collect();
            let observed = ctx.take_observed();
            drop(ctx);
            drop(bound);
            clip_grad_norm(&mut grads, cfg.grad_clip);
            for (i, gi) in grads.iter().enumerate() {
                opt.step(i, model.store.value_mut(crate::nn::ParamId(i)), gi, lr as f32);
            }
            for (id, stats) in &observed {
                model.store.bn_stats_mut()[id.0].momentum_update(stats, BN_MOMENTUM);
            }
            if !model.store.all_finite() {
                return Err(Error::Divergence {
                    phase: "retrain",
                    step: epoch * steps as u64 + b as u64,
                    detail: "weights became non-finite".into(),
                });
            }
        }
        last = evaluate(model, test, &norm, 256)?;
        best = best.max(last);
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / steps as f64,
            train_accuracy: hits as f64 / (steps * cfg.batch_size) as f64,
            test_accuracy: last,
        };
        on_epoch(&rec);
        curve.push(rec);
    }
    Ok(RetrainResult {
        genotype_hash: model.genotype.hash(),
        final_accuracy: last,
        best_accuracy: best,
        size,
        curve,
        flags: RetrainFlags {
            auxiliary: cfg.auxiliary,
            drop_path: cfg.drop_path,
            cutout: cfg.augment.cutout,
            epochs: cfg.epochs,
        },
    })
}
