//! Parameter counts of discrete networks against an independent walk over
//! the macro architecture.

use maskarch::nn::ParamGroup;
use maskarch::retrain::{build_discrete_network, RetrainConfig};
use maskarch::search_space::{CellKind, Genotype, OpSet, OperationKind, SearchSpace};
use proptest::prelude::*;

fn op_params(op: OperationKind, c: usize, stride: usize) -> usize {
    use OperationKind::*;
    match op {
        None | MaxPool3x3 | AvgPool3x3 => 0,
        SkipConnect if stride == 1 => 0,
        SkipConnect => c * c + 2 * c,
        SepConv3x3 => 2 * (9 * c + c * c + 2 * c),
        SepConv5x5 => 2 * (25 * c + c * c + 2 * c),
        DilConv3x3 => 9 * c + c * c + 2 * c,
        DilConv5x5 => 25 * c + c * c + 2 * c,
        Conv1x1 => c * c + 2 * c,
        Conv3x3 => 9 * c * c + 2 * c,
    }
}

fn rcb1x1(cin: usize, c: usize) -> usize {
    cin * c + 2 * c
}

/// Stem, preprocessing, operations and classifier, cell by cell.
fn expected(g: &Genotype, cfg: &RetrainConfig, classes: usize) -> (usize, usize) {
    let reductions = [cfg.layers.div_ceil(3), (2 * cfg.layers).div_ceil(3)];
    let stem = 3 * cfg.init_channels;
    let mut total = 3 * stem * 9 + 2 * stem;
    let mut ops_total = 0;
    let (mut c_pp, mut c_p, mut c) = (stem, stem, cfg.init_channels);
    let mut prev_red = false;
    for i in 0..cfg.layers {
        let red = reductions.contains(&i);
        if red {
            c *= 2;
        }
        total += if prev_red { c_pp * c + 2 * c } else { rcb1x1(c_pp, c) };
        total += rcb1x1(c_p, c);
        let kind = if red { CellKind::Reduction } else { CellKind::Normal };
        for pairs in g.cell(kind) {
            for &(op, pred) in pairs {
                let stride = if red && pred < 2 { 2 } else { 1 };
                ops_total += op_params(op, c, stride);
            }
        }
        c_pp = c_p;
        c_p = 4 * c;
        prev_red = red;
    }
    total += ops_total + c_p * classes + classes;
    (total, ops_total)
}

fn genotype_from(choice: &[(u8, u8)]) -> Genotype {
    let ops = OpSet::darts();
    let ops: Vec<OperationKind> = ops.ops().iter().copied().filter(|&o| o != OperationKind::None).collect();
    let cell = |offset: usize| -> Vec<Vec<(OperationKind, usize)>> {
        (0..4)
            .map(|i| {
                let (a, b) = choice[offset + i];
                let node_inputs = i + 2;
                let p1 = a as usize % node_inputs;
                let p2 = (p1 + 1 + b as usize % (node_inputs - 1)) % node_inputs;
                let mut pairs = vec![
                    (ops[(a as usize / 3) % ops.len()], p1),
                    (ops[(b as usize / 3) % ops.len()], p2),
                ];
                pairs.sort_by_key(|p| p.1);
                pairs
            })
            .collect()
    };
    Genotype::new(cell(0), cell(4))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn counts_match_the_layer_walk(choice in prop::collection::vec((0u8..=255, 0u8..=255), 8), c in 1usize..4, layers in 3usize..9) {
        let space = SearchSpace::darts(4, OpSet::darts()).unwrap();
        let g = genotype_from(&choice);
        prop_assume!(g.ensure_valid(&space).is_ok());
        let cfg = RetrainConfig { layers, init_channels: 2 * c, ..RetrainConfig::default() };
        let net = build_discrete_network(&g, &space, &cfg, 10).unwrap();
        let (total, ops) = expected(&g, &cfg, 10);
        prop_assert_eq!(net.store.num_elements(), total);
        prop_assert_eq!(net.store.count_group(ParamGroup::Op), ops);
    }
}

#[test]
fn all_skip_cells_contribute_only_fixed_layers() {
    let space = SearchSpace::darts(4, OpSet::darts()).unwrap();
    let skip = |red: bool| -> Vec<Vec<(OperationKind, usize)>> {
        let op = if red { OperationKind::MaxPool3x3 } else { OperationKind::SkipConnect };
        (0..4).map(|i| vec![(op, 0), (op, i + 1)]).collect()
    };
    let g = Genotype::new(skip(false), skip(true));
    let cfg = RetrainConfig::default();
    let net = build_discrete_network(&g, &space, &cfg, 10).unwrap();
    assert_eq!(net.store.count_group(ParamGroup::Op), 0);
    assert_eq!(net.store.num_elements(), expected(&g, &cfg, 10).0);
}

#[test]
fn doubling_width_approaches_four_times_the_op_parameters() {
    let space = SearchSpace::darts(4, OpSet::darts()).unwrap();
    let conv = |_: bool| -> Vec<Vec<(OperationKind, usize)>> {
        (0..4).map(|i| vec![(OperationKind::SepConv3x3, 0), (OperationKind::DilConv5x5, i + 1)]).collect()
    };
    let g = Genotype::new(conv(false), conv(true));
    let ops_at = |c| {
        let cfg = RetrainConfig {
            init_channels: c,
            ..RetrainConfig::default()
        };
        build_discrete_network(&g, &space, &cfg, 10).unwrap().store.count_group(ParamGroup::Op) as f64
    };
    // Quadratic pointwise terms dominate; depthwise and batch-norm terms
    // are linear in the width, so the ratio approaches 4 from below.
    let ratio = ops_at(32) / ops_at(16);
    let analytic = |c| {
        let cfg = RetrainConfig {
            init_channels: c,
            ..RetrainConfig::default()
        };
        expected(&g, &cfg, 10).1 as f64
    };
    assert_eq!(ratio, analytic(32) / analytic(16));
    assert!((3.2..4.0).contains(&ratio), "{ratio}");
    assert!(ops_at(256) / ops_at(128) > 3.9);
    let size = |c| {
        let cfg = RetrainConfig {
            init_channels: c,
            ..RetrainConfig::default()
        };
        build_discrete_network(&g, &space, &cfg, 10).unwrap().size((32, 32)).unwrap()
    };
    let (s16, s32) = (size(16), size(32));
    let mac_ratio = s32.macs as f64 / s16.macs as f64;
    assert!((3.0..4.0).contains(&mac_ratio), "{mac_ratio}");
}
