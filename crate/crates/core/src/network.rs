//! Cell-based networks shared by the supernet, child models and retrained
//! discrete networks. Which operations exist on an edge is decided by a
//! [`CellPlan`]; how they are mixed is decided at forward time by [`Mixing`].

use maskarch_tensor::{ConvParams, PoolKind, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::candidates::{CandidateOp, FactorizedReduce, OpStyle, ReluConvBn};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Ctx, ParamGroup, ParamStore};
use crate::search_space::{CellGenotype, CellKind, CellSpec, SearchSpace, Topology};

/// Operation indices instantiated on each edge of a cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellPlan {
    pub edge_ops: Vec<Vec<usize>>,
}

impl CellPlan {
    /// Every operation on every edge (the supernet).
    pub fn full(spec: &CellSpec) -> Self {
        Self {
            edge_ops: vec![(0..spec.op_set.len()).collect(); spec.num_edges()],
        }
    }

    /// Only the operations chosen by a genotype.
    pub fn from_genotype(spec: &CellSpec, cell: &CellGenotype) -> Result<Self> {
        let mut edge_ops = vec![Vec::new(); spec.num_edges()];
        for (e, k) in genotype_edges(spec, cell)? {
            edge_ops[e].push(k);
        }
        Ok(Self { edge_ops })
    }
}

/// `(edge index, op index)` of every pair in a cell genotype.
pub fn genotype_edges(spec: &CellSpec, cell: &CellGenotype) -> Result<Vec<(usize, usize)>> {
    if cell.len() != spec.num_nodes {
        return Err(Error::NotExpressible(format!(
            "{} cell genotype has {} nodes, supernet cell has {}",
            spec.cell_kind,
            cell.len(),
            spec.num_nodes
        )));
    }
    let mut out = Vec::new();
    for (i, pairs) in cell.iter().enumerate() {
        let node = spec.num_inputs + i;
        for &(op, pred) in pairs {
            let e = spec.edge_index(pred, node).ok_or_else(|| {
                Error::NotExpressible(format!("{} cell has no edge {pred}->{node}", spec.cell_kind))
            })?;
            let k = spec.op_set.index_of(op).ok_or_else(|| {
                Error::NotExpressible(format!("{op} is not in the {} operation set", spec.cell_kind))
            })?;
            out.push((e, k));
        }
    }
    Ok(out)
}

/// Mixing weights of one cell kind, `[edges, ops]` row-major.
#[derive(Clone, Debug)]
pub enum Mix {
    /// Differentiable weights (softmax of the architecture parameters).
    /// Every operation must be instantiated.
    Tracked(Tensor),
    /// Constant weights; zero entries are skipped entirely.
    Fixed { weights: Vec<f32>, ops: usize },
}

impl Mix {
    /// One-hot weights selecting the genotype's operations; edges the
    /// genotype does not use get an all-zero row.
    pub fn one_hot(spec: &CellSpec, cell: &CellGenotype) -> Result<Self> {
        let k = spec.op_set.len();
        let mut weights = vec![0.0; spec.num_edges() * k];
        for (e, op) in genotype_edges(spec, cell)? {
            weights[e * k + op] = 1.0;
        }
        Ok(Mix::Fixed { weights, ops: k })
    }
}

#[derive(Clone, Debug)]
pub struct Mixing {
    pub normal: Mix,
    pub reduction: Option<Mix>,
}

impl Mixing {
    fn get(&self, kind: CellKind) -> Result<&Mix> {
        match kind {
            CellKind::Normal => Ok(&self.normal),
            CellKind::Reduction => self
                .reduction
                .as_ref()
                .ok_or_else(|| Error::Usage("no mixing weights for the reduction cell".into())),
        }
    }
}

/// Sums the weighted outputs of the operations on one edge. Returns `None`
/// when every weight is a fixed zero.
pub fn mixed_edge_forward(
    ctx: &Ctx,
    ops: &[(usize, CandidateOp)],
    names: &[String],
    x: &Tensor,
    mix: &Mix,
    edge: usize,
) -> Result<Option<Tensor>> {
    let run = |k: usize, op: &CandidateOp| -> Result<Tensor> {
        let y = op.forward(ctx, x)?;
        if !y.all_finite() {
            return Err(Error::NonFiniteOp { op: names[k].clone() });
        }
        Ok(y)
    };
    match mix {
        Mix::Tracked(w) => {
            let row = w.row(edge)?;
            if ops.len() != row.len() {
                return Err(Error::Usage(format!(
                    "edge {edge} instantiates {} of {} operations; differentiable mixing needs all",
                    ops.len(),
                    row.len()
                )));
            }
            let outs = ops.iter().map(|(k, op)| run(*k, op)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor> = outs.iter().collect();
            Ok(Some(Tensor::weighted_sum(&refs, &row)?))
        }
        Mix::Fixed { weights, ops: k_total } => {
            let row = &weights[edge * k_total..(edge + 1) * k_total];
            let mut acc: Option<Tensor> = None;
            for (k, op) in ops {
                let wk = row[*k];
                if wk == 0.0 || op.is_zero() {
                    continue;
                }
                let mut y = run(*k, op)?;
                if !op.is_identity() {
                    y = ctx.drop_path(y)?;
                }
                if wk != 1.0 {
                    y = y.scale(wk)?;
                }
                acc = Some(match acc {
                    Some(a) => a.add(&y)?,
                    None => y,
                });
            }
            Ok(acc)
        }
    }
}

#[derive(Clone, Debug)]
enum Preprocess {
    Rcb(ReluConvBn),
    Reduce(FactorizedReduce),
}

impl Preprocess {
    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        match self {
            Preprocess::Rcb(p) => p.forward(ctx, x),
            Preprocess::Reduce(p) => p.forward(ctx, x),
        }
    }
}

/// A searchable (or discretized) cell.
#[derive(Clone, Debug)]
pub struct Cell {
    pub kind: CellKind,
    pub spec: CellSpec,
    pre: Vec<Preprocess>,
    edges: Vec<Vec<(usize, CandidateOp)>>,
    op_names: Vec<String>,
}

impl Cell {
    /// Output of every node (inputs first).
    pub fn node_outputs(&self, ctx: &Ctx, inputs: &[&Tensor], mix: &Mix) -> Result<Vec<Tensor>> {
        if inputs.len() != self.spec.num_inputs {
            return Err(Error::Usage(format!(
                "{} cell takes {} inputs, got {}",
                self.kind,
                self.spec.num_inputs,
                inputs.len()
            )));
        }
        let mut states: Vec<Tensor> = if self.pre.is_empty() {
            inputs.iter().map(|t| (*t).clone()).collect()
        } else {
            self.pre
                .iter()
                .zip(inputs)
                .map(|(p, x)| p.forward(ctx, x))
                .collect::<Result<_>>()?
        };
        for node in self.spec.num_inputs..self.spec.total_nodes() {
            let mut terms = Vec::new();
            for e in self.spec.incoming(node) {
                let from = self.spec.edges[e].0;
                if let Some(y) = mixed_edge_forward(ctx, &self.edges[e], &self.op_names, &states[from], mix, e)? {
                    terms.push(y);
                }
            }
            if terms.is_empty() {
                return Err(Error::NotExpressible(format!("node {node} of the {} cell has no active input", self.kind)));
            }
            let first = terms[0].shape().to_vec();
            if let Some(bad) = terms.iter().find(|t| t.shape() != first.as_slice()) {
                return Err(Error::Usage(format!(
                    "node {node} of the {} cell receives mismatched shapes {:?} and {:?}",
                    self.kind,
                    first,
                    bad.shape()
                )));
            }
            let refs: Vec<&Tensor> = terms.iter().collect();
            states.push(if refs.len() == 1 { terms[0].clone() } else { Tensor::add_n(&refs)? });
        }
        Ok(states)
    }

    pub fn forward(&self, ctx: &Ctx, inputs: &[&Tensor], mix: &Mix) -> Result<Tensor> {
        let states = self.node_outputs(ctx, inputs, mix)?;
        match self.spec.topology {
            Topology::Darts => {
                let nodes: Vec<&Tensor> = states[self.spec.num_inputs..].iter().collect();
                Ok(Tensor::concat_channels(&nodes)?)
            }
            Topology::Bench201 => Ok(states.last().expect("cell has nodes").clone()),
        }
    }
}

/// Fixed residual block used as the reduction stage of dense-cell networks.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv_a: ReluConvBn,
    conv_b: ReluConvBn,
    shortcut: Conv,
}

impl ResBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv_a: ReluConvBn::new(store, rng, &format!("{name}.a"), ParamGroup::Fixed, cin, cout, 3, 2, true),
            conv_b: ReluConvBn::new(store, rng, &format!("{name}.b"), ParamGroup::Fixed, cout, cout, 3, 1, true),
            shortcut: Conv::new(
                store,
                rng,
                &format!("{name}.shortcut"),
                ParamGroup::Fixed,
                cin,
                cout,
                1,
                ConvParams::default(),
                false,
            ),
        }
    }

    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let main = self.conv_b.forward(ctx, &self.conv_a.forward(ctx, x)?)?;
        let short = self.shortcut.forward(ctx, &x.pool2d(PoolKind::Avg, 2, 2, 0)?)?;
        Ok(main.add(&short)?)
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Cell(Cell),
    Res(ResBlock),
}

/// Macro-architecture settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroConfig {
    pub num_cells: usize,
    pub init_channels: usize,
    pub stem_multiplier: usize,
    /// Cell indices that halve resolution.
    pub reductions: [usize; 2],
}

impl MacroConfig {
    /// Reductions at one and two thirds of the depth, rounded up.
    pub fn default_reductions(num_cells: usize) -> [usize; 2] {
        [num_cells.div_ceil(3), (2 * num_cells).div_ceil(3)]
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let [r1, r2] = self.reductions;
        if self.num_cells < 3 {
            p.push(format!("num_cells {} must be at least 3", self.num_cells));
        } else if !(1 <= r1 && r1 < r2 && r2 < self.num_cells) {
            p.push(format!(
                "reduction positions {:?} must satisfy 1 <= r1 < r2 <= num_cells - 1 = {}",
                self.reductions,
                self.num_cells - 1
            ));
        }
        if self.init_channels < 2 || !self.init_channels.is_multiple_of(2) {
            p.push(format!("init_channels {} must be even and positive", self.init_channels));
        }
        if self.stem_multiplier == 0 {
            p.push("stem_multiplier must be positive".into());
        }
        p
    }
}

/// Per-layer output of a network forward pass.
pub struct LayerOutputs {
    pub stem: Tensor,
    pub layers: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub space: SearchSpace,
    pub macro_cfg: MacroConfig,
    stem_conv: Conv,
    stem_bn: BatchNorm,
    pub layers: Vec<Layer>,
    /// Output channels of every layer.
    pub channels: Vec<usize>,
}

impl Network {
    /// Builds the stem and cells. `plan` picks the operations instantiated
    /// per cell kind; `search` selects non-affine op batch norms and pooling
    /// batch norms as used during search.
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        space: &SearchSpace,
        macro_cfg: &MacroConfig,
        plan: &dyn Fn(CellKind) -> Result<CellPlan>,
        search: bool,
    ) -> Result<Self> {
        let problems = macro_cfg.problems();
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        for spec in space.cells() {
            spec.validate()?;
        }
        let topology = space.topology();
        let style = OpStyle {
            affine: !search,
            pool_bn: search && topology == Topology::Darts,
        };
        let c = macro_cfg.init_channels;
        let stem_c = macro_cfg.stem_multiplier * c;
        let stem_conv = Conv::new(store, rng, "stem.conv", ParamGroup::Stem, 3, stem_c, 3, ConvParams::new(1, 1, 1, 1), false);
        let stem_bn = BatchNorm::new(store, "stem.bn", ParamGroup::Stem, stem_c, true);
        let normal_plan = plan(CellKind::Normal)?;
        let reduction_plan = match space.reduction {
            Some(_) => Some(plan(CellKind::Reduction)?),
            None => None,
        };

        let mut layers = Vec::with_capacity(macro_cfg.num_cells);
        let mut channels = Vec::with_capacity(macro_cfg.num_cells);
        let (mut c_pp, mut c_p, mut c_curr) = (stem_c, stem_c, c);
        let mut reduction_prev = false;
        for i in 0..macro_cfg.num_cells {
            let name = format!("cells.{i}");
            let reduction = macro_cfg.reductions.contains(&i);
            if reduction {
                c_curr *= 2;
            }
            match topology {
                Topology::Bench201 if reduction => {
                    layers.push(Layer::Res(ResBlock::new(store, rng, &name, c_p, c_curr)));
                    c_p = c_curr;
                }
                Topology::Bench201 => {
                    if c_p != c_curr {
                        return Err(Error::Usage(format!(
                            "dense cells need the stem width {c_p} to equal init_channels {c_curr}; set stem_multiplier to 1"
                        )));
                    }
                    let spec = space.normal.clone();
                    let cell = build_cell(store, rng, &name, spec, &normal_plan, Vec::new(), c_curr, false, style);
                    layers.push(Layer::Cell(cell));
                }
                Topology::Darts => {
                    let kind = if reduction { CellKind::Reduction } else { CellKind::Normal };
                    let (spec, plan) = match kind {
                        CellKind::Normal => (space.normal.clone(), &normal_plan),
                        CellKind::Reduction => (
                            space.reduction.clone().ok_or_else(|| {
                                Error::SearchSpace("DARTS topology needs a reduction cell".into())
                            })?,
                            reduction_plan.as_ref().expect("built with the reduction spec"),
                        ),
                    };
                    let pre0 = if reduction_prev {
                        Preprocess::Reduce(FactorizedReduce::new(
                            store,
                            rng,
                            &format!("{name}.pre0"),
                            ParamGroup::Preprocess,
                            c_pp,
                            c_curr,
                            style.affine,
                        ))
                    } else {
                        Preprocess::Rcb(ReluConvBn::new(
                            store,
                            rng,
                            &format!("{name}.pre0"),
                            ParamGroup::Preprocess,
                            c_pp,
                            c_curr,
                            1,
                            1,
                            style.affine,
                        ))
                    };
                    let pre1 = Preprocess::Rcb(ReluConvBn::new(
                        store,
                        rng,
                        &format!("{name}.pre1"),
                        ParamGroup::Preprocess,
                        c_p,
                        c_curr,
                        1,
                        1,
                        style.affine,
                    ));
                    let num_nodes = spec.num_nodes;
                    let cell = build_cell(store, rng, &name, spec, plan, vec![pre0, pre1], c_curr, reduction, style);
                    layers.push(Layer::Cell(cell));
                    c_pp = c_p;
                    c_p = num_nodes * c_curr;
                }
            }
            reduction_prev = reduction;
            channels.push(c_p);
        }
        Ok(Self {
            space: space.clone(),
            macro_cfg: macro_cfg.clone(),
            stem_conv,
            stem_bn,
            layers,
            channels,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor, mixing: &Mixing) -> Result<LayerOutputs> {
        let stem = self.stem_bn.forward(ctx, &self.stem_conv.forward(ctx, x)?)?;
        let mut layers: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = if i == 0 { &stem } else { &layers[i - 1] };
            let out = match layer {
                Layer::Res(block) => block.forward(ctx, prev)?,
                Layer::Cell(cell) => {
                    let mix = mixing.get(cell.kind)?;
                    if cell.spec.num_inputs == 2 {
                        let prev2 = if i < 2 { &stem } else { &layers[i - 2] };
                        cell.forward(ctx, &[prev2, prev], mix)?
                    } else {
                        cell.forward(ctx, &[prev], mix)?
                    }
                }
            };
            layers.push(out);
        }
        Ok(LayerOutputs { stem, layers })
    }

    /// Indices of the layers tapped for the three pyramid levels.
    pub fn tap_layers(&self) -> [usize; 3] {
        let [r1, r2] = self.macro_cfg.reductions;
        [r1 - 1, r2 - 1, self.layers.len() - 1]
    }

    pub fn tap_channels(&self) -> [usize; 3] {
        self.tap_layers().map(|i| self.channels[i])
    }

    pub fn cells(&self) -> impl Iterator<Item = &Cell> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Cell(c) => Some(c),
            Layer::Res(_) => None,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn build_cell(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    spec: CellSpec,
    plan: &CellPlan,
    pre: Vec<Preprocess>,
    c: usize,
    reduction: bool,
    style: OpStyle,
) -> Cell {
    let ops = spec.op_set.ops().to_vec();
    let edges = spec
        .edges
        .iter()
        .enumerate()
        .map(|(e, &(from, _))| {
            let stride = if reduction && from < spec.num_inputs { 2 } else { 1 };
            plan.edge_ops[e]
                .iter()
                .map(|&k| {
                    let op = CandidateOp::new(ops[k], store, rng, &format!("{name}.edges.{e}"), c, stride, style);
                    (k, op)
                })
                .collect()
        })
        .collect();
    Cell {
        kind: spec.cell_kind,
        op_names: ops.iter().map(|o| o.name().to_string()).collect(),
        spec,
        pre,
        edges,
    }
}
