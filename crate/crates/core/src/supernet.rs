//! The weight-sharing encoder: stacked relaxed cells producing a
//! three-level feature pyramid.

use maskarch_tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{CellPlan, MacroConfig, Mix, Mixing, Network};
use crate::nn::{Ctx, ParamStore};
use crate::search_space::{ArchParams, Genotype, OpSet, SearchSpace, Topology};

pub use crate::network::mixed_edge_forward as mixed_op_forward;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupernetConfig {
    pub topology: Topology,
    pub num_cells: usize,
    pub init_channels: usize,
    /// Intermediate nodes per cell.
    pub num_nodes: usize,
    pub op_set: OpSet,
    /// Defaults to one and two thirds of the depth, rounded up.
    pub reduction_positions: Option<[usize; 2]>,
    /// Stem width as a multiple of `init_channels`; defaults to 3 for DARTS
    /// cells and 1 for dense cells.
    pub stem_multiplier: Option<usize>,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        Self {
            topology: Topology::Darts,
            num_cells: 5,
            init_channels: 16,
            num_nodes: 4,
            op_set: OpSet::darts(),
            reduction_positions: None,
            stem_multiplier: None,
        }
    }
}

impl SupernetConfig {
    /// Dense single-input cells with the given operation set.
    pub fn bench201(num_cells: usize, init_channels: usize, op_set: OpSet) -> Self {
        Self {
            topology: Topology::Bench201,
            num_cells,
            init_channels,
            num_nodes: 3,
            op_set,
            reduction_positions: None,
            stem_multiplier: None,
        }
    }

    pub fn space(&self) -> Result<SearchSpace> {
        match self.topology {
            Topology::Darts => SearchSpace::darts(self.num_nodes, self.op_set.clone()),
            Topology::Bench201 => SearchSpace::bench201(self.num_nodes, self.op_set.clone()),
        }
    }

    pub fn macro_config(&self) -> MacroConfig {
        MacroConfig {
            num_cells: self.num_cells,
            init_channels: self.init_channels,
            stem_multiplier: self.stem_multiplier.unwrap_or(match self.topology {
                Topology::Darts => 3,
                Topology::Bench201 => 1,
            }),
            reductions: self
                .reduction_positions
                .unwrap_or_else(|| MacroConfig::default_reductions(self.num_cells)),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = self.macro_config().problems();
        if let Err(e) = self.space() {
            p.push(e.to_string());
        }
        p
    }
}

/// Encoder features at full, half and quarter input resolution.
pub struct FeaturePyramid {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
    pub input_hw: (usize, usize),
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&Tensor; 3] {
        [&self.f1, &self.f2, &self.f3]
    }

    /// Checks the full/half/quarter resolution contract.
    pub fn check(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        let n = self.f1.shape().first().copied().unwrap_or(0);
        for (level, (f, div)) in self.levels().into_iter().zip([1usize, 2, 4]).enumerate() {
            let (fn_, _, fh, fw) = f.dims4()?;
            if fn_ != n || fh * div != h || fw * div != w {
                return Err(Error::Usage(format!(
                    "pyramid level F{} is {:?}; expected batch {n} at {}x{}",
                    level + 1,
                    f.shape(),
                    h / div,
                    w / div
                )));
            }
            if !f.all_finite() {
                return Err(Error::NonFiniteOp {
                    op: format!("pyramid level F{}", level + 1),
                });
            }
        }
        Ok(())
    }
}

/// Builds the supernet with every candidate operation on every edge.
pub fn build_supernet(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &SupernetConfig) -> Result<Network> {
    let space = cfg.space()?;
    let plan = |kind| {
        let spec = space
            .cell(kind)
            .ok_or_else(|| Error::SearchSpace(format!("no {kind} cell in the search space")))?;
        Ok(CellPlan::full(spec))
    };
    Network::build(store, rng, &space, &cfg.macro_config(), &plan, true)
}

/// Runs the encoder and taps the last cell of each resolution stage.
pub fn forward_features(net: &Network, ctx: &Ctx, x: &Tensor, mixing: &Mixing) -> Result<FeaturePyramid> {
    let (_, _, h, w) = x.dims4()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Usage(format!("input {h}x{w} is not divisible by 4")));
    }
    let out = net.forward(ctx, x, mixing)?;
    let [a, b, c] = net.tap_layers();
    let pyr = FeaturePyramid {
        f1: out.layers[a].clone(),
        f2: out.layers[b].clone(),
        f3: out.layers[c].clone(),
        input_hw: (h, w),
    };
    pyr.check()?;
    Ok(pyr)
}

/// Differentiable mixing from (tracked) architecture parameter tensors.
pub fn softmax_mixing(alpha_normal: &Tensor, alpha_reduction: Option<&Tensor>) -> Result<Mixing> {
    Ok(Mixing {
        normal: Mix::Tracked(alpha_normal.softmax_rows()?),
        reduction: alpha_reduction
            .map(|a| a.softmax_rows().map(Mix::Tracked))
            .transpose()?,
    })
}

/// Constant softmax mixing of the current architecture parameters.
pub fn fixed_softmax_mixing(arch: &ArchParams) -> Mixing {
    let fixed = |m: &crate::search_space::AlphaMatrix| Mix::Fixed {
        weights: m.softmax().into_iter().flatten().map(|v| v as f32).collect(),
        ops: m.ops,
    };
    Mixing {
        normal: fixed(&arch.normal),
        reduction: arch.reduction.as_ref().map(fixed),
    }
}

/// One-hot mixing selecting a genotype's operations (a child model).
pub fn genotype_mixing(space: &SearchSpace, g: &Genotype) -> Result<Mixing> {
    g.ensure_valid(space)?;
    Ok(Mixing {
        normal: Mix::one_hot(&space.normal, &g.cell_kinds.normal)?,
        reduction: space
            .reduction
            .as_ref()
            .map(|spec| Mix::one_hot(spec, &g.cell_kinds.reduction))
            .transpose()?,
    })
}
