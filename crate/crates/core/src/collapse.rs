//! Collapse detection: skip-connection census of genotypes and skip
//! dominance over the architecture-parameter trajectory.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::search::AlphaSnapshot;
use crate::search_space::{CellKind, Genotype, OperationKind, SearchSpace};

pub const DEFAULT_COLLAPSE_THRESHOLD: usize = 4;

/// Number of `skip_connect` entries in one cell kind, without validation.
pub fn skip_tally(g: &Genotype, kind: CellKind) -> usize {
    g.cell(kind).iter().flatten().filter(|(op, _)| op.is_skip()).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub normal: usize,
    pub reduction: usize,
}

/// Skip counts per cell kind of a genotype that is valid for `space`.
pub fn count_skip_connections(g: &Genotype, space: &SearchSpace) -> Result<SkipCounts> {
    g.ensure_valid(space)?;
    Ok(SkipCounts {
        normal: skip_tally(g, CellKind::Normal),
        reduction: skip_tally(g, CellKind::Reduction),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominancePoint {
    pub step: u64,
    pub epoch: u64,
    /// Softmax weight of `skip_connect` on every normal-cell edge.
    pub normal: Vec<f64>,
    pub reduction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub skip_count_normal: usize,
    pub skip_count_reduction: usize,
    pub threshold: usize,
    pub collapsed: bool,
    pub dominance: Vec<DominancePoint>,
}

/// True iff the normal cell has at least `threshold` skip connections.
pub fn collapse_flag(report: &CollapseReport) -> bool {
    report.skip_count_normal >= report.threshold
}

/// Skip-connection softmax weight per edge for every snapshot.
pub fn dominance_trace(history: &[AlphaSnapshot], space: &SearchSpace) -> Vec<DominancePoint> {
    let skip_weights = |kind: CellKind, snap: &AlphaSnapshot| -> Vec<f64> {
        let (Some(spec), Some(m)) = (space.cell(kind), snap.arch.matrix(kind)) else {
            return Vec::new();
        };
        let Some(k) = spec.op_set.index_of(OperationKind::SkipConnect) else {
            return Vec::new();
        };
        m.softmax().into_iter().map(|row| row[k]).collect()
    };
    history
        .iter()
        .map(|s| DominancePoint {
            step: s.step,
            epoch: s.epoch,
            normal: skip_weights(CellKind::Normal, s),
            reduction: skip_weights(CellKind::Reduction, s),
        })
        .collect()
}

pub fn collapse_report(g: &Genotype, space: &SearchSpace, history: &[AlphaSnapshot], threshold: usize) -> Result<CollapseReport> {
    let counts = count_skip_connections(g, space)?;
    let mut report = CollapseReport {
        skip_count_normal: counts.normal,
        skip_count_reduction: counts.reduction,
        threshold,
        collapsed: false,
        dominance: dominance_trace(history, space),
    };
    report.collapsed = collapse_flag(&report);
    Ok(report)
}

/// Line plot of the normal-cell skip weights per edge against epoch.
pub fn dominance_svg(trace: &[DominancePoint]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let max_epoch = trace.iter().map(|p| p.epoch).max().unwrap_or(0).max(1) as f64;
    let edges = trace.first().map_or(0, |p| p.normal.len());
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let _ = writeln!(s, r#"<text x="{pad}" y="20" font-size="12">skip_connect weight per normal edge vs epoch</text>"#);
    for e in 0..edges {
        let pts: Vec<String> = trace
            .iter()
            .map(|p| {
                let x = pad + (w - 2.0 * pad) * p.epoch as f64 / max_epoch;
                let y = h - pad - (h - 2.0 * pad) * p.normal[e];
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let hue = 360.0 * e as f64 / edges.max(1) as f64;
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="hsl({hue:.0},70%,45%)" points="{}"/>"#,
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{derive_genotype, ArchParams, OpSet};

    fn space() -> SearchSpace {
        SearchSpace::darts(4, OpSet::darts()).unwrap()
    }

    fn genotype_with(ops: [OperationKind; 8]) -> Genotype {
        let normal = (0..4)
            .map(|i| vec![(ops[2 * i], 0), (ops[2 * i + 1], 1)])
            .collect();
        let reduction = (0..4).map(|_| vec![(OperationKind::MaxPool3x3, 0), (OperationKind::MaxPool3x3, 1)]).collect();
        Genotype::new(normal, reduction)
    }

    #[test]
    fn counts_and_flag() {
        use OperationKind::*;
        let s = space();
        let all_skip = genotype_with([SkipConnect; 8]);
        assert_eq!(count_skip_connections(&all_skip, &s).unwrap().normal, 8);
        let none = genotype_with([SepConv3x3; 8]);
        assert_eq!(count_skip_connections(&none, &s).unwrap().normal, 0);
        let mixed = genotype_with([SkipConnect, SepConv3x3, SkipConnect, MaxPool3x3, DilConv3x3, SkipConnect, AvgPool3x3, SepConv5x5]);
        assert_eq!(count_skip_connections(&mixed, &s).unwrap().normal, 3);
        let mut bad = none.clone();
        bad.cell_kinds.normal[0][0].0 = None;
        assert!(count_skip_connections(&bad, &s).is_err());

        for (skips, expected) in [(6, true), (1, false), (4, true), (3, false)] {
            let r = CollapseReport {
                skip_count_normal: skips,
                skip_count_reduction: 0,
                threshold: DEFAULT_COLLAPSE_THRESHOLD,
                collapsed: false,
                dominance: Vec::new(),
            };
            assert_eq!(collapse_flag(&r), expected, "{skips}");
        }
    }

    #[test]
    fn dominance_trace_examples() {
        let s = space();
        let k = s.normal.op_set.index_of(OperationKind::SkipConnect).unwrap();
        let mut hist = Vec::new();
        let mut arch = ArchParams::zeros(&s);
        for epoch in 0..5u64 {
            hist.push(AlphaSnapshot {
                step: epoch * 10,
                epoch,
                arch: arch.clone(),
            });
            for e in 0..14 {
                arch.normal.row_mut(e)[k] += 0.5;
            }
        }
        let tr = dominance_trace(&hist, &s);
        assert!(tr[0].normal.iter().all(|&w| (w - 1.0 / 8.0).abs() < 1e-12));
        for pair in tr.windows(2) {
            assert!(pair[1].normal[3] > pair[0].normal[3]);
            assert_eq!(pair[1].reduction, pair[0].reduction);
        }
        assert!(dominance_svg(&tr).contains("polyline"));
        let g = derive_genotype(&arch, &s).unwrap();
        let rep = collapse_report(&g, &s, &hist, 4).unwrap();
        assert!(rep.collapsed);
    }
}
