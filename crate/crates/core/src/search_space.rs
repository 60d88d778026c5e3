//! Candidate operations, cell topologies, continuous architecture
//! parameters and their discretization into genotypes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const GENOTYPE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperationKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "conv_1x1")]
    Conv1x1,
    #[serde(rename = "conv_3x3")]
    Conv3x3,
}

impl OperationKind {
    pub const ALL: [OperationKind; 10] = [
        Self::None,
        Self::SkipConnect,
        Self::SepConv3x3,
        Self::SepConv5x5,
        Self::DilConv3x3,
        Self::DilConv5x5,
        Self::MaxPool3x3,
        Self::AvgPool3x3,
        Self::Conv1x1,
        Self::Conv3x3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::SkipConnect => "skip_connect",
            Self::SepConv3x3 => "sep_conv_3x3",
            Self::SepConv5x5 => "sep_conv_5x5",
            Self::DilConv3x3 => "dil_conv_3x3",
            Self::DilConv5x5 => "dil_conv_5x5",
            Self::MaxPool3x3 => "max_pool_3x3",
            Self::AvgPool3x3 => "avg_pool_3x3",
            Self::Conv1x1 => "conv_1x1",
            Self::Conv3x3 => "conv_3x3",
        }
    }

    /// Whether the operation owns trainable weights (on a stride-1 edge).
    pub fn is_parametric(self) -> bool {
        matches!(
            self,
            Self::SepConv3x3
                | Self::SepConv5x5
                | Self::DilConv3x3
                | Self::DilConv5x5
                | Self::Conv1x1
                | Self::Conv3x3
        )
    }

    pub fn is_skip(self) -> bool {
        self == Self::SkipConnect
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::SearchSpace(format!("unknown operation {s:?}")))
    }
}

/// Ordered, duplicate-free list of candidate operations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<OperationKind>", into = "Vec<OperationKind>")]
pub struct OpSet(Vec<OperationKind>);

impl OpSet {
    pub fn new(ops: Vec<OperationKind>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::SearchSpace("operation set is empty".into()));
        }
        for (i, op) in ops.iter().enumerate() {
            if ops[..i].contains(op) {
                return Err(Error::SearchSpace(format!("operation {op} listed twice")));
            }
        }
        Ok(Self(ops))
    }

    /// The eight-operation DARTS set.
    pub fn darts() -> Self {
        use OperationKind::*;
        Self(vec![
            None,
            MaxPool3x3,
            AvgPool3x3,
            SkipConnect,
            SepConv3x3,
            SepConv5x5,
            DilConv3x3,
            DilConv5x5,
        ])
    }

    /// The five-operation NAS-Bench-201 set.
    pub fn bench201() -> Self {
        use OperationKind::*;
        Self(vec![None, SkipConnect, Conv1x1, Conv3x3, AvgPool3x3])
    }

    /// Three-operation subset used by the local micro-benchmark.
    pub fn micro() -> Self {
        use OperationKind::*;
        Self(vec![SkipConnect, Conv3x3, AvgPool3x3])
    }

    pub fn ops(&self) -> &[OperationKind] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, op: OperationKind) -> Option<usize> {
        self.0.iter().position(|&o| o == op)
    }

    pub fn contains(&self, op: OperationKind) -> bool {
        self.0.contains(&op)
    }
}

impl TryFrom<Vec<OperationKind>> for OpSet {
    type Error = Error;

    fn try_from(ops: Vec<OperationKind>) -> Result<Self> {
        Self::new(ops)
    }
}

impl From<OpSet> for Vec<OperationKind> {
    fn from(set: OpSet) -> Self {
        set.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Reduction,
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Normal => "normal",
            CellKind::Reduction => "reduction",
        })
    }
}

/// How a cell is wired and discretized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Two cell inputs, every intermediate node fed by all earlier nodes,
    /// discretized to the two strongest incoming edges per node. The cell
    /// output concatenates all intermediate nodes.
    Darts,
    /// One cell input and a dense DAG in which every edge is kept at
    /// discretization; the cell output is the last node.
    Bench201,
}

/// Node indices count cell inputs first: inputs are `0..num_inputs`,
/// intermediate nodes follow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub num_nodes: usize,
    pub num_inputs: usize,
    pub edges: Vec<(usize, usize)>,
    pub op_set: OpSet,
    pub cell_kind: CellKind,
    pub topology: Topology,
}

impl CellSpec {
    fn dense_edges(num_inputs: usize, num_nodes: usize) -> Vec<(usize, usize)> {
        (num_inputs..num_inputs + num_nodes)
            .flat_map(|to| (0..to).map(move |from| (from, to)))
            .collect()
    }

    pub fn darts(cell_kind: CellKind, num_nodes: usize, op_set: OpSet) -> Result<Self> {
        let spec = Self {
            num_nodes,
            num_inputs: 2,
            edges: Self::dense_edges(2, num_nodes),
            op_set,
            cell_kind,
            topology: Topology::Darts,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Dense single-input cell. `num_nodes` counts intermediate nodes, so the
    /// usual 4-node benchmark cell has `num_nodes = 3` and 6 edges.
    pub fn bench201(num_nodes: usize, op_set: OpSet) -> Result<Self> {
        let spec = Self {
            num_nodes,
            num_inputs: 1,
            edges: Self::dense_edges(1, num_nodes),
            op_set,
            cell_kind: CellKind::Normal,
            topology: Topology::Bench201,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn total_nodes(&self) -> usize {
        self.num_inputs + self.num_nodes
    }

    /// Edge indices entering `node`, in ascending predecessor order.
    pub fn incoming(&self, node: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.edges.len()).filter(|&e| self.edges[e].1 == node).collect();
        idx.sort_by_key(|&e| self.edges[e].0);
        idx
    }

    pub fn edge_index(&self, from: usize, to: usize) -> Option<usize> {
        self.edges.iter().position(|&e| e == (from, to))
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_nodes == 0 {
            problems.push("cell has no intermediate nodes".to_string());
        }
        if self.num_inputs == 0 {
            problems.push("cell has no inputs".to_string());
        }
        let total = self.total_nodes();
        for (i, &(from, to)) in self.edges.iter().enumerate() {
            if from >= to {
                problems.push(format!("edge {i} ({from}->{to}) does not point forward"));
            }
            if to < self.num_inputs || to >= total {
                problems.push(format!("edge {i} ({from}->{to}) does not end at an intermediate node"));
            }
            if self.edges[..i].contains(&(from, to)) {
                problems.push(format!("edge {from}->{to} listed twice"));
            }
        }
        let min_in = match self.topology {
            Topology::Darts => 2,
            Topology::Bench201 => 1,
        };
        for node in self.num_inputs..total {
            let n_in = self.edges.iter().filter(|e| e.1 == node).count();
            if n_in < min_in {
                problems.push(format!("node {node} has {n_in} incoming edges, needs at least {min_in}"));
            }
        }
        if self.op_set.ops().iter().all(|&op| op == OperationKind::None) {
            problems.push("operation set has no operation other than none".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::SearchSpace(problems.join("; ")))
        }
    }
}

/// The normal cell plus, for DARTS-style spaces, a searched reduction cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub normal: CellSpec,
    pub reduction: Option<CellSpec>,
}

impl SearchSpace {
    pub fn darts(num_nodes: usize, op_set: OpSet) -> Result<Self> {
        Ok(Self {
            normal: CellSpec::darts(CellKind::Normal, num_nodes, op_set.clone())?,
            reduction: Some(CellSpec::darts(CellKind::Reduction, num_nodes, op_set)?),
        })
    }

    pub fn bench201(num_nodes: usize, op_set: OpSet) -> Result<Self> {
        Ok(Self {
            normal: CellSpec::bench201(num_nodes, op_set)?,
            reduction: None,
        })
    }

    pub fn topology(&self) -> Topology {
        self.normal.topology
    }

    pub fn cell(&self, kind: CellKind) -> Option<&CellSpec> {
        match kind {
            CellKind::Normal => Some(&self.normal),
            CellKind::Reduction => self.reduction.as_ref(),
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = &CellSpec> {
        std::iter::once(&self.normal).chain(self.reduction.as_ref())
    }
}

/// Architecture parameters of one cell kind: one row per edge, one column
/// per candidate op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaMatrix {
    pub edges: usize,
    pub ops: usize,
    pub values: Vec<f32>,
}

impl AlphaMatrix {
    pub fn zeros(edges: usize, ops: usize) -> Self {
        Self {
            edges,
            ops,
            values: vec![0.0; edges * ops],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let ops = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ops) {
            return Err(Error::SearchSpace("ragged architecture parameter rows".into()));
        }
        Ok(Self {
            edges: rows.len(),
            ops,
            values: rows.concat(),
        })
    }

    pub fn row(&self, edge: usize) -> &[f32] {
        &self.values[edge * self.ops..(edge + 1) * self.ops]
    }

    pub fn row_mut(&mut self, edge: usize) -> &mut [f32] {
        &mut self.values[edge * self.ops..(edge + 1) * self.ops]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Softmax of every row, computed in `f64`.
    pub fn softmax(&self) -> Vec<Vec<f64>> {
        (0..self.edges).map(|e| softmax(self.row(e))).collect()
    }
}

pub fn softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub normal: AlphaMatrix,
    pub reduction: Option<AlphaMatrix>,
}

impl ArchParams {
    pub fn zeros(space: &SearchSpace) -> Self {
        let m = |c: &CellSpec| AlphaMatrix::zeros(c.num_edges(), c.op_set.len());
        Self {
            normal: m(&space.normal),
            reduction: space.reduction.as_ref().map(m),
        }
    }

    /// Small random initialization as in DARTS (`1e-3 · N(0, 1)`).
    pub fn random(space: &SearchSpace, rng: &mut impl rand::Rng) -> Self {
        let mut a = Self::zeros(space);
        for m in a.matrices_mut() {
            for v in &mut m.values {
                *v = 1e-3 * rand_distr::Distribution::<f32>::sample(&rand_distr::StandardNormal, rng);
            }
        }
        a
    }

    pub fn matrix(&self, kind: CellKind) -> Option<&AlphaMatrix> {
        match kind {
            CellKind::Normal => Some(&self.normal),
            CellKind::Reduction => self.reduction.as_ref(),
        }
    }

    pub fn matrices(&self) -> impl Iterator<Item = &AlphaMatrix> {
        std::iter::once(&self.normal).chain(self.reduction.as_ref())
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut AlphaMatrix> {
        std::iter::once(&mut self.normal).chain(self.reduction.as_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().all(AlphaMatrix::is_finite)
    }

    /// Checks that the matrices are shaped for `space`.
    pub fn check_shape(&self, space: &SearchSpace) -> Result<()> {
        let expected = Self::zeros(space);
        let dims = |a: &ArchParams| {
            a.matrices().map(|m| (m.edges, m.ops)).collect::<Vec<_>>()
        };
        if dims(self) != dims(&expected) {
            return Err(Error::SearchSpace(format!(
                "architecture parameters shaped {:?}, search space needs {:?}",
                dims(self),
                dims(&expected)
            )));
        }
        Ok(())
    }

    /// Mixture weights on one edge: the softmax of its row.
    pub fn edge_weights(&self, kind: CellKind, edge: usize) -> Result<Vec<f64>> {
        let m = self.matrix(kind).ok_or(Error::UnknownEdge {
            kind,
            edge,
            num_edges: 0,
        })?;
        if edge >= m.edges {
            return Err(Error::UnknownEdge {
                kind,
                edge,
                num_edges: m.edges,
            });
        }
        Ok(softmax(m.row(edge)))
    }
}

/// `(operation, predecessor node)`.
pub type Pair = (OperationKind, usize);

/// One entry per intermediate node.
pub type CellGenotype = Vec<Vec<Pair>>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellKinds {
    pub normal: CellGenotype,
    #[serde(default)]
    pub reduction: CellGenotype,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub schema_version: u32,
    pub cell_kinds: CellKinds,
}

impl Genotype {
    pub fn new(normal: CellGenotype, reduction: CellGenotype) -> Self {
        Self {
            schema_version: GENOTYPE_SCHEMA_VERSION,
            cell_kinds: CellKinds { normal, reduction },
        }
    }

    pub fn cell(&self, kind: CellKind) -> &CellGenotype {
        match kind {
            CellKind::Normal => &self.cell_kinds.normal,
            CellKind::Reduction => &self.cell_kinds.reduction,
        }
    }

    /// Pretty JSON with lexicographically ordered keys.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("genotype always serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value always serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(text)?;
        if g.schema_version != GENOTYPE_SCHEMA_VERSION {
            return Err(Error::Genotype(vec![format!(
                "schema_version {} is not supported (expected {GENOTYPE_SCHEMA_VERSION})",
                g.schema_version
            )]));
        }
        Ok(g)
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_json().as_bytes()))
    }

    pub fn all_pairs(&self) -> impl Iterator<Item = (CellKind, &Pair)> {
        let n = self.cell_kinds.normal.iter().flatten().map(|p| (CellKind::Normal, p));
        let r = self.cell_kinds.reduction.iter().flatten().map(|p| (CellKind::Reduction, p));
        n.chain(r)
    }

    /// Rejects genotypes that violate any invariant for `space`.
    pub fn ensure_valid(&self, space: &SearchSpace) -> Result<()> {
        let v = validate_genotype(self, space);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Genotype(v))
        }
    }
}

/// Discretizes one cell. For DARTS topologies each node keeps the two
/// incoming edges whose strongest non-`none` weight is largest; every kept
/// edge takes its argmax non-`none` op. Ties go to the lower op index, then
/// the lower predecessor. Pairs are listed in ascending predecessor order.
pub fn derive_cell(alpha: &AlphaMatrix, spec: &CellSpec) -> Result<CellGenotype> {
    if alpha.edges != spec.num_edges() || alpha.ops != spec.op_set.len() {
        return Err(Error::Derive(format!(
            "{} alpha is {}x{}, cell has {} edges and {} ops",
            spec.cell_kind,
            alpha.edges,
            alpha.ops,
            spec.num_edges(),
            spec.op_set.len()
        )));
    }
    if !alpha.is_finite() {
        return Err(Error::Derive(format!("{} alpha contains non-finite values", spec.cell_kind)));
    }
    let ops = spec.op_set.ops();
    let best_op = |edge: usize| -> Option<(usize, f64)> {
        let w = softmax(alpha.row(edge));
        let mut best: Option<(usize, f64)> = None;
        for (k, &op) in ops.iter().enumerate() {
            if op == OperationKind::None {
                continue;
            }
            if best.is_none_or(|(_, bw)| w[k] > bw) {
                best = Some((k, w[k]));
            }
        }
        best
    };

    let mut cell = Vec::with_capacity(spec.num_nodes);
    for node in spec.num_inputs..spec.total_nodes() {
        let mut cands: Vec<(usize, usize, f64)> = spec
            .incoming(node)
            .into_iter()
            .filter_map(|e| best_op(e).map(|(k, w)| (spec.edges[e].0, k, w)))
            .collect();
        let keep = match spec.topology {
            Topology::Darts => 2,
            Topology::Bench201 => cands.len(),
        };
        if cands.len() < keep.max(1) {
            return Err(Error::Derive(format!(
                "node {node} of the {} cell has {} candidate incoming edges, needs {}",
                spec.cell_kind,
                cands.len(),
                keep.max(1)
            )));
        }
        // Stable sort keeps ascending predecessor order among equal strengths.
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        cands.truncate(keep);
        cands.sort_by_key(|c| c.0);
        cell.push(cands.into_iter().map(|(pred, k, _)| (ops[k], pred)).collect());
    }
    Ok(cell)
}

pub fn derive_genotype(arch: &ArchParams, space: &SearchSpace) -> Result<Genotype> {
    arch.check_shape(space).map_err(|e| Error::Derive(e.to_string()))?;
    let normal = derive_cell(&arch.normal, &space.normal)?;
    let reduction = match (&space.reduction, &arch.reduction) {
        (Some(spec), Some(alpha)) => derive_cell(alpha, spec)?,
        _ => Vec::new(),
    };
    Ok(Genotype::new(normal, reduction))
}

fn validate_cell(cell: &CellGenotype, spec: &CellSpec, out: &mut Vec<String>) {
    let kind = spec.cell_kind;
    if cell.len() != spec.num_nodes {
        out.push(format!("{kind} cell has {} nodes, expected {}", cell.len(), spec.num_nodes));
    }
    for (i, pairs) in cell.iter().enumerate() {
        let node = spec.num_inputs + i;
        let expected = match spec.topology {
            Topology::Darts => 2,
            Topology::Bench201 => spec.incoming(node).len(),
        };
        if pairs.len() != expected {
            out.push(format!("{kind} node {node} has {} pairs, expected {expected}", pairs.len()));
        }
        for (j, &(op, pred)) in pairs.iter().enumerate() {
            if op == OperationKind::None {
                out.push(format!("{kind} node {node} uses forbidden op none"));
            } else if !spec.op_set.contains(op) {
                out.push(format!("{kind} node {node} uses {op}, which is not in the operation set"));
            }
            if pred >= node {
                out.push(format!("{kind} node {node} has predecessor {pred} >= node index"));
            } else if spec.edge_index(pred, node).is_none() {
                out.push(format!("{kind} node {node} has no edge from {pred}"));
            }
            if pairs[..j].iter().any(|&(_, p)| p == pred) {
                out.push(format!("{kind} node {node} uses predecessor {pred} twice"));
            }
        }
    }
}

/// Lists every invariant violation of `g` against `space`; empty means valid.
pub fn validate_genotype(g: &Genotype, space: &SearchSpace) -> Vec<String> {
    let mut out = Vec::new();
    if g.schema_version != GENOTYPE_SCHEMA_VERSION {
        out.push(format!(
            "schema_version {} (expected {GENOTYPE_SCHEMA_VERSION})",
            g.schema_version
        ));
    }
    validate_cell(&g.cell_kinds.normal, &space.normal, &mut out);
    match &space.reduction {
        Some(spec) => validate_cell(&g.cell_kinds.reduction, spec, &mut out),
        None => {
            if !g.cell_kinds.reduction.is_empty() {
                out.push("reduction cell given but the search space has a fixed reduction block".into());
            }
        }
    }
    out
}

/// Every genotype of a dense single-input space, in lexicographic order of
/// op indices over edges.
pub fn enumerate_dense(spec: &CellSpec) -> Result<Vec<CellGenotype>> {
    if spec.topology != Topology::Bench201 {
        return Err(Error::SearchSpace("enumeration needs a dense single-input cell".into()));
    }
    let ops: Vec<OperationKind> = spec
        .op_set
        .ops()
        .iter()
        .copied()
        .filter(|&o| o != OperationKind::None)
        .collect();
    let e = spec.num_edges();
    let total = ops
        .len()
        .checked_pow(e as u32)
        .filter(|&t| t <= 1 << 24)
        .ok_or_else(|| Error::SearchSpace("space too large to enumerate".into()))?;
    let mut out = Vec::with_capacity(total);
    for mut code in 0..total {
        let mut choice = vec![0usize; e];
        for c in choice.iter_mut().rev() {
            *c = code % ops.len();
            code /= ops.len();
        }
        out.push(dense_from_choice(spec, &ops, &choice));
    }
    Ok(out)
}

fn dense_from_choice(spec: &CellSpec, ops: &[OperationKind], choice: &[usize]) -> CellGenotype {
    (spec.num_inputs..spec.total_nodes())
        .map(|node| {
            spec.incoming(node)
                .into_iter()
                .map(|e| (ops[choice[e]], spec.edges[e].0))
                .collect()
        })
        .collect()
}
