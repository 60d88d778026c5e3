//! Parameter storage, batch-norm statistics and the basic layers the
//! networks are assembled from.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use maskarch_tensor::{BatchStats, ConvParams, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(pub usize);

/// What a parameter belongs to, for parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Stem,
    Preprocess,
    Op,
    Fixed,
    Head,
    Decoder,
    MaskToken,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub value: Rc<Vec<f32>>,
}

/// Flat list of named parameters plus batch-norm running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    bn: Vec<RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, group: ParamGroup, shape: &[usize], value: Vec<f32>) -> ParamId {
        self.params.push(Param {
            name,
            group,
            shape: shape.to_vec(),
            value: Rc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the default initialization of
    /// common deep-learning frameworks for convolutions and linear layers.
    pub fn uniform_fan_in(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        fan_in: usize,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let n: usize = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.push(name.into(), group, shape, value)
    }

    pub fn constant(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], v: f32) -> ParamId {
        let n: usize = shape.iter().product();
        self.push(name.into(), group, shape, vec![v; n])
    }

    pub fn add_bn(&mut self, channels: usize) -> BnId {
        self.bn.push(RunningStats::new(channels));
        BnId(self.bn.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<f32> {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn bn_stats(&self) -> &[RunningStats] {
        &self.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.bn
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Tensors for every parameter, registered as leaves on `tape` when
    /// one is given and untracked otherwise.
    pub fn bind(&self, tape: Option<&Tape>) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| {
                let t = Tensor::from_rc(p.value.clone(), &p.shape).expect("stored shape matches value");
                match tape {
                    Some(tape) => tape.leaf(t),
                    None => t,
                }
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Concatenation of every parameter value followed by every running
    /// statistic, in creation order.
    pub fn to_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_elements());
        for p in &self.params {
            out.extend_from_slice(&p.value);
        }
        for s in &self.bn {
            out.extend_from_slice(&s.mean);
            out.extend_from_slice(&s.var);
        }
        out
    }

    pub fn flat_len(&self) -> usize {
        self.num_elements() + self.bn.iter().map(|s| 2 * s.mean.len()).sum::<usize>()
    }

    pub fn load_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::Usage(format!(
                "weight blob holds {} values, network needs {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            Rc::make_mut(&mut p.value).copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        for s in &mut self.bn {
            let c = s.mean.len();
            s.mean.copy_from_slice(&flat[off..off + c]);
            s.var.copy_from_slice(&flat[off + c..off + 2 * c]);
            off += 2 * c;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    /// Unbiased variance estimate.
    pub var: Vec<f32>,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }

    fn unbiased(stats: &BatchStats) -> Vec<f32> {
        let m = stats.count as f32;
        let f = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        stats.var.iter().map(|v| v * f).collect()
    }

    pub fn momentum_update(&mut self, stats: &BatchStats, momentum: f32) {
        let var = Self::unbiased(stats);
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * stats.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * var[c];
        }
    }
}

/// Cumulative (equal-weight) average of batch statistics, used to
/// recalibrate running statistics on a fixed set of batches.
#[derive(Default)]
pub struct Calibration {
    sums: Vec<Option<(Vec<f64>, Vec<f64>, usize)>>,
}

impl Calibration {
    pub fn add(&mut self, observed: &[(BnId, BatchStats)]) {
        for (id, stats) in observed {
            if self.sums.len() <= id.0 {
                self.sums.resize(id.0 + 1, None);
            }
            let var = RunningStats::unbiased(stats);
            let slot = self.sums[id.0].get_or_insert_with(|| {
                (vec![0.0; stats.mean.len()], vec![0.0; stats.mean.len()], 0)
            });
            for c in 0..stats.mean.len() {
                slot.0[c] += stats.mean[c] as f64;
                slot.1[c] += var[c] as f64;
            }
            slot.2 += 1;
        }
    }

    /// Overwrites the running statistics of every layer that was observed.
    pub fn apply(&self, store: &mut ParamStore) {
        for (i, slot) in self.sums.iter().enumerate() {
            if let Some((m, v, k)) = slot {
                let s = &mut store.bn[i];
                for c in 0..m.len() {
                    s.mean[c] = (m[c] / *k as f64) as f32;
                    s.var[c] = (v[c] / *k as f64) as f32;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the current batch's statistics.
    Batch,
    /// Normalize with stored running statistics.
    Running,
}

/// Per-forward context: bound parameter tensors, batch-norm behaviour and
/// counters.
pub struct Ctx<'a> {
    params: &'a [Tensor],
    running: &'a [RunningStats],
    pub bn_mode: BnMode,
    observed: RefCell<Vec<(BnId, BatchStats)>>,
    macs: Cell<u64>,
    drop_path: Option<(f32, RefCell<ChaCha8Rng>)>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a [Tensor], store: &'a ParamStore, bn_mode: BnMode) -> Self {
        Self {
            params,
            running: &store.bn,
            bn_mode,
            observed: RefCell::new(Vec::new()),
            macs: Cell::new(0),
            drop_path: None,
        }
    }

    pub fn with_drop_path(mut self, prob: f32, rng: ChaCha8Rng) -> Self {
        if prob > 0.0 {
            self.drop_path = Some((prob, RefCell::new(rng)));
        }
        self
    }

    pub fn p(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn take_observed(&self) -> Vec<(BnId, BatchStats)> {
        self.observed.take()
    }

    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub(crate) fn add_macs(&self, m: u64) {
        self.macs.set(self.macs.get() + m);
    }

    /// Zeroes whole samples with probability `p` and rescales survivors.
    pub(crate) fn drop_path(&self, x: Tensor) -> Result<Tensor> {
        let Some((p, rng)) = &self.drop_path else {
            return Ok(x);
        };
        let n = x.shape()[0];
        let keep = 1.0 - p;
        let mut rng = rng.borrow_mut();
        let factors: Vec<f32> = (0..n)
            .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Ok(x.mul_per_sample(&factors)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: ConvParams,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        params: ConvParams,
        bias: bool,
    ) -> Self {
        let cin_g = cin / params.groups;
        let fan_in = cin_g * kernel * kernel;
        let weight = store.uniform_fan_in(rng, format!("{name}.weight"), group, &[cout, cin_g, kernel, kernel], fan_in);
        let bias = bias.then(|| store.constant(format!("{name}.bias"), group, &[cout], 0.0));
        Self {
            weight,
            bias,
            params,
            cin,
            cout,
            kernel,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), self.params)?;
        let per_out = (self.cin / self.params.groups * self.kernel * self.kernel) as u64;
        ctx.add_macs(y.len() as u64 * per_out);
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub id: BnId,
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, channels: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(store.constant(format!("{name}.gamma"), group, &[channels], 1.0)),
                Some(store.constant(format!("{name}.beta"), group, &[channels], 0.0)),
            )
        } else {
            (None, None)
        };
        Self {
            id: store.add_bn(channels),
            gamma,
            beta,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let gamma = self.gamma.map(|g| ctx.p(g));
        let beta = self.beta.map(|b| ctx.p(b));
        match ctx.bn_mode {
            BnMode::Batch => {
                let out = x.batch_norm_train(gamma, beta, BN_EPS)?;
                ctx.observed.borrow_mut().push((self.id, out.stats));
                Ok(out.output)
            }
            BnMode::Running => {
                let s = &ctx.running[self.id.0];
                Ok(x.batch_norm_eval(&s.mean, &s.var, gamma, beta, BN_EPS)?)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, group: ParamGroup, cin: usize, cout: usize) -> Self {
        Self {
            weight: store.uniform_fan_in(rng, format!("{name}.weight"), group, &[cout, cin], cin),
            bias: store.uniform_fan_in(rng, format!("{name}.bias"), group, &[cout], cin),
            cin,
            cout,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = x.linear(ctx.p(self.weight), Some(ctx.p(self.bias)))?;
        ctx.add_macs((y.len() * self.cin) as u64);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn flat_round_trip_and_running_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut store, &mut rng, "c", ParamGroup::Op, 2, 3, 3, ConvParams::new(1, 1, 1, 1), true);
        let bn = BatchNorm::new(&mut store, "bn", ParamGroup::Op, 3, true);
        assert_eq!(store.num_elements(), 3 * 2 * 9 + 3 + 6);
        let x = Tensor::from_vec((0..2 * 2 * 16).map(|i| (i % 7) as f32).collect(), &[2, 2, 4, 4]).unwrap();
        let bound = store.bind(None);
        let ctx = Ctx::new(&bound, &store, BnMode::Batch);
        let y = bn.forward(&ctx, &conv.forward(&ctx, &x).unwrap()).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 4]);
        assert_eq!(ctx.macs(), (2 * 3 * 16 * 18) as u64);
        let obs = ctx.take_observed();
        drop(ctx);
        drop(bound);
        let mut cal = Calibration::default();
        cal.add(&obs);
        cal.add(&obs);
        cal.apply(&mut store);
        assert!((store.bn_stats()[0].mean[0] - obs[0].1.mean[0]).abs() < 1e-6);

        let flat = store.to_flat();
        let mut other = store.clone();
        other.value_mut(conv.weight).iter_mut().for_each(|v| *v = 0.0);
        other.load_flat(&flat).unwrap();
        assert_eq!(other.to_flat(), flat);
        assert!(other.load_flat(&flat[1..]).is_err());
    }
}
