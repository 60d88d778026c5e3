//! Acceptance suite. Every test writes one `criterion N ... PASS|FAIL`
//! line straight to stdout (so it shows without `--nocapture`).
//!
//! Criteria 7 to 10 need the CIFAR-10 binary batches under
//! `MASKARCH_DATA_ROOT`. Without them the line reads `FAIL (BLOCKED ...)`
//! and the test returns; with them the full protocol runs and a miss fails
//! the test.

mod common;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use maskarch::analysis::{kendall_tau, kendall_tau_pairs};
use maskarch::candidates::{CandidateOp, OpStyle};
use maskarch::commands::{
    cmd_analyze, cmd_bench, cmd_derive, cmd_retrain, cmd_search, search_images, RunOptions, BENCH_FILE, GENOTYPE_FILE,
};
use maskarch::config::{ExperimentConfig, ENV_DATA_ROOT};
use maskarch::decoder::DecoderConfig;
use maskarch::masking::{generate_mask, MaskSpec, PatchMask};
use maskarch::model::{MaskFill, MaskedModel};
use maskarch::network::Mix;
use maskarch::nn::{BnMode, Ctx, ParamStore};
use maskarch::objective::masked_l1_loss;
use maskarch::search::{alpha_step, run_search, weight_step, SearchData, SearchEvent, SearchState};
use maskarch::search_space::{ArchParams, Genotype, OpSet, OperationKind, Topology};
use maskarch::supernet::{fixed_softmax_mixing, forward_features, mixed_op_forward, FeaturePyramid, SupernetConfig};
use maskarch_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FRESH: RunOptions = RunOptions {
    overwrite: false,
    resume: false,
};

fn report(n: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n:>2} {name:<28} {verdict}  {detail}").unwrap();
    out.flush().unwrap();
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(), shape).unwrap()
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os(ENV_DATA_ROOT).map(PathBuf::from)
}

fn blocked(n: u32, name: &str) {
    report(
        n,
        name,
        false,
        &format!("(BLOCKED: CIFAR-10 not available; set {ENV_DATA_ROOT} to the directory of the binary batches)"),
    );
}

#[test]
fn c01_mask_exactness() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut cases = 0;
    for (h, w) in [(32, 32), (64, 64), (32, 64)] {
        for patch in [2, 4, 8, 16] {
            for ratio in [0.1, 0.3, 0.5, 0.7] {
                let spec = MaskSpec::new(h, w, patch, ratio).unwrap();
                let expected = (ratio * spec.num_patches() as f64).round() as usize;
                for seed in 0..8u64 {
                    cases += 1;
                    let m = generate_mask(&spec, seed).unwrap();
                    let px = m.pixel_mask();
                    let count = m.grid.iter().filter(|&&b| b).count();
                    let aligned = (0..h).all(|y| {
                        (0..w).all(|x| px[y * w + x] == px[(y / patch * patch) * w + x / patch * patch])
                    });
                    let pixels = px.iter().filter(|&&b| b).count();
                    let same = generate_mask(&spec, seed).unwrap() == m;
                    if count != expected || !aligned || pixels != expected * patch * patch || !same {
                        failures.push(format!("{h}x{w} p{patch} r{ratio} seed {seed}"));
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = failures.is_empty() && elapsed.as_secs_f64() < 1.0;
    report(
        1,
        "mask exactness",
        ok,
        &format!("{cases} masks, {} wrong, {:.3} s (limit 1 s)", failures.len(), elapsed.as_secs_f64()),
    );
    assert!(ok, "{failures:?}");
}

#[test]
fn c02_loss_locality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    let trials = 50;
    for _ in 0..trials {
        let (n, hw) = (rng.random_range(1..4), 4 * rng.random_range(1..5));
        let target = random_tensor(&mut rng, &[n, 3, hw, hw]);
        let pred = random_tensor(&mut rng, &[n, 3, hw, hw]);
        let spec = MaskSpec::new(hw, hw, 2, rng.random_range(0.3..0.9)).unwrap();
        let masks: Vec<PatchMask> = (0..n).map(|_| generate_mask(&spec, rng.random()).unwrap()).collect();
        let pixel_mask: Vec<bool> = masks.iter().flat_map(|m| m.pixel_mask()).collect();
        let base = masked_l1_loss(&pred, &target, &pixel_mask).unwrap().item();

        let mut perturbed = pred.to_vec();
        let plane = hw * hw;
        for (i, v) in perturbed.iter_mut().enumerate() {
            let (img, pix) = (i / (3 * plane), i % plane);
            if !pixel_mask[img * plane + pix] {
                *v = match rng.random_range(0..4) {
                    0 => 1e30,
                    1 => -7.5,
                    2 => f32::INFINITY,
                    _ => rng.random_range(-1e6..1e6),
                };
            }
        }
        let perturbed = Tensor::from_vec(perturbed, pred.shape()).unwrap();
        let after = masked_l1_loss(&perturbed, &target, &pixel_mask).unwrap().item();
        let perfect = masked_l1_loss(&target, &target, &pixel_mask).unwrap().item();
        if after.to_bits() != base.to_bits() || perfect != 0.0 {
            bad += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = bad == 0 && elapsed < 1.0;
    report(2, "loss locality", ok, &format!("{trials} trials, {bad} violations, {elapsed:.3} s (limit 1 s)"));
    assert!(ok);
}

fn random_supernet(rng: &mut ChaCha8Rng) -> SupernetConfig {
    let init_channels = 2 * rng.random_range(1..4);
    if rng.random_bool(0.5) {
        SupernetConfig {
            num_cells: rng.random_range(3..7),
            init_channels,
            num_nodes: rng.random_range(2..5),
            ..SupernetConfig::default()
        }
    } else {
        SupernetConfig::bench201(rng.random_range(3..7), init_channels, OpSet::bench201())
    }
}

fn grad_norm(grads: &maskarch_tensor::Gradients, t: &Tensor) -> f64 {
    grads
        .get(t)
        .map_or(0.0, |g| g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
}

#[test]
fn c03_decoder_contract() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut problems = Vec::new();
    let mut smallest = f64::INFINITY;
    for case in 0..10 {
        let supernet = random_supernet(&mut rng);
        let hw = 4 * rng.random_range(2..6);
        let n = rng.random_range(1..4);
        let embed_width = rng.random_range(2..9);
        let x = random_tensor(&mut rng, &[n, 3, hw, hw]);
        let spec = MaskSpec::new(hw, hw, 4, 0.5).unwrap();
        let masks: Vec<PatchMask> = (0..n).map(|_| generate_mask(&spec, rng.random()).unwrap()).collect();
        let seed = rng.random();
        for hierarchical in [true, false] {
            let decoder = DecoderConfig {
                embed_width,
                use_hierarchical: hierarchical,
            };
            let model = MaskedModel::new(&supernet, &decoder, MaskFill::Embedding, seed).unwrap();
            let mixing = fixed_softmax_mixing(&ArchParams::random(model.space(), &mut rng));
            let label = format!("case {case} ({:?}, {} cells, {hw}px, hd={hierarchical})", supernet.topology, supernet.num_cells);

            let bound = model.store.bind(None);
            let ctx = Ctx::new(&bound, &model.store, BnMode::Batch);
            let (pred, pixel_mask) = model.reconstruct(&ctx, &x, &masks, &mixing).unwrap();
            if pred.shape() != x.shape() {
                problems.push(format!("{label}: output {:?} for input {:?}", pred.shape(), x.shape()));
            }

            // Gradients reaching each pyramid tap through the decoder.
            let pyr = forward_features(&model.encoder, &ctx, &x, &mixing).unwrap();
            let tape = Tape::new();
            let tracked = model.store.bind(Some(&tape));
            let tctx = Ctx::new(&tracked, &model.store, BnMode::Batch);
            let taps = FeaturePyramid {
                f1: tape.leaf(pyr.f1.detach()),
                f2: tape.leaf(pyr.f2.detach()),
                f3: tape.leaf(pyr.f3.detach()),
                input_hw: pyr.input_hw,
            };
            let out = model.decoder.forward(&tctx, &taps).unwrap();
            let loss = masked_l1_loss(&out, &x, &pixel_mask).unwrap();
            let grads = tape.backward(&loss.value).unwrap();
            let norms = [grad_norm(&grads, &taps.f1), grad_norm(&grads, &taps.f2), grad_norm(&grads, &taps.f3)];
            let expected = if hierarchical { [true, true, true] } else { [false, false, true] };
            for (level, (&g, &want)) in norms.iter().zip(&expected).enumerate() {
                if want {
                    smallest = smallest.min(g);
                }
                if (g > 1e-10) != want {
                    problems.push(format!("{label}: |grad F{}| = {g:e}", level + 1));
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = problems.is_empty() && elapsed < 60.0;
    report(
        3,
        "decoder contract",
        ok,
        &format!(
            "10 configs x 2 decoders, {} problems, smallest required tap gradient {smallest:.2e}, {elapsed:.1} s (limit 60 s)",
            problems.len()
        ),
    );
    assert!(ok, "{problems:?}");
}

fn relative_error(got: &[f32], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = got.iter().zip(reference).fold(0.0f64, |m, (&g, &r)| m.max((g as f64 - r).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn mixed_op_cases() -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let kinds = OpSet::darts().ops().to_vec();
    for case in 0..100 {
        let c = 2 * rng.random_range(1..4);
        let stride = if rng.random_bool(0.3) { 2 } else { 1 };
        let style = OpStyle {
            affine: rng.random_bool(0.5),
            pool_bn: rng.random_bool(0.5),
        };
        let mut store = ParamStore::new();
        let ops: Vec<(usize, CandidateOp)> = kinds
            .iter()
            .enumerate()
            .map(|(k, &kind)| (k, CandidateOp::new(kind, &mut store, &mut rng, &format!("c{case}"), c, stride, style)))
            .collect();
        let names: Vec<String> = kinds.iter().map(|k| k.name().to_string()).collect();
        let hw = 2 * rng.random_range(2..5);
        let n = rng.random_range(1..4);
        let x = random_tensor(&mut rng, &[n, c, hw, hw]);
        let bound = store.bind(None);
        let ctx = Ctx::new(&bound, &store, BnMode::Batch);

        let k = kinds.len();
        let alpha = Tensor::from_vec((0..k).map(|_| rng.random_range(-3.0..3.0)).collect(), &[1, k]).unwrap();
        let soft = alpha.softmax_rows().unwrap();
        let mut sparse: Vec<f32> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        for v in sparse.iter_mut() {
            if rng.random_bool(0.3) {
                *v = 0.0;
            }
        }
        for (mix, weights) in [
            (Mix::Tracked(soft.clone()), soft.to_vec()),
            (
                Mix::Fixed {
                    weights: sparse.clone(),
                    ops: k,
                },
                sparse.clone(),
            ),
        ] {
            let got = mixed_op_forward(&ctx, &ops, &names, &x, &mix, 0).unwrap();
            let mut reference: Option<Vec<f64>> = None;
            for (kk, op) in &ops {
                let y = op.forward(&ctx, &x).unwrap();
                let acc = reference.get_or_insert_with(|| vec![0.0; y.len()]);
                for (a, &v) in acc.iter_mut().zip(y.data()) {
                    *a += weights[*kk] as f64 * v as f64;
                }
            }
            let reference = reference.unwrap();
            let got = got.map(|t| t.to_vec()).unwrap_or_else(|| vec![0.0; reference.len()]);
            worst = worst.max(relative_error(&got, &reference));
        }
    }
    (200, worst)
}

#[test]
fn c04_mixed_op_oracle() {
    let start = Instant::now();
    let (cases, worst) = mixed_op_cases();

    let mut cfg = common::tiny_darts();
    cfg.search.epochs = 250;
    let setup = cfg.search_setup();
    let images = search_images(&cfg).unwrap();
    let mut steps = 0;
    let mut row_error = 0.0f64;
    let mut check = |state: &SearchState| {
        for m in state.arch.matrices() {
            for row in m.softmax() {
                row_error = row_error.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            let t = Tensor::from_vec(m.values.clone(), &[m.edges, m.ops]).unwrap().softmax_rows().unwrap();
            for row in t.data().chunks(m.ops) {
                row_error = row_error.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            }
        }
    };
    run_search(&setup, &images, None, &mut |e| {
        match e {
            SearchEvent::Step(s, _) => {
                steps += 1;
                check(s);
            }
            SearchEvent::EpochEnd(s, _) => check(s),
        }
        Ok(())
    })
    .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let ok = worst <= 1e-5 && steps == 500 && row_error <= 1e-6 && elapsed < 300.0;
    report(
        4,
        "mixed-op oracle",
        ok,
        &format!(
            "{cases} mixes, max rel err {worst:.2e} (tol 1e-5); {steps} search steps, max |row sum - 1| {row_error:.2e} (tol 1e-6); {elapsed:.1} s (limit 300 s)"
        ),
    );
    assert!(ok);
}

fn loss_at(state: &SearchState, batch: &Tensor, masks: &[PatchMask]) -> f32 {
    let store = &state.model.store;
    let bound = store.bind(None);
    let ctx = Ctx::new(&bound, store, BnMode::Batch);
    state
        .model
        .loss(&ctx, batch, masks, &fixed_softmax_mixing(&state.arch))
        .unwrap()
        .item()
}

#[test]
fn c05_bilevel_descent() {
    let start = Instant::now();
    let lr = 1e-3f32;
    let mut held = 0;
    let mut details = Vec::new();
    for seed in 0..10u64 {
        let mut cfg = common::tiny_darts();
        cfg.search.seed = seed;
        cfg.search.alpha_lr = lr;
        let images = search_images(&cfg).unwrap();
        let data = SearchData::new(&images, &cfg.search).unwrap();
        let (tb, tm) = data.batch(&cfg.search, 0, 0).unwrap();
        let (vb, vm) = data.batch(&cfg.search, 0, 1).unwrap();

        let mut state = SearchState::new(&cfg.search_setup()).unwrap();
        let w_before = loss_at(&state, &tb, &tm);
        weight_step(&mut state, &cfg.search, &tb, &tm, lr).unwrap();
        let w_after = loss_at(&state, &tb, &tm);

        let mut state = SearchState::new(&cfg.search_setup()).unwrap();
        let a_before = loss_at(&state, &vb, &vm);
        alpha_step(&mut state, &cfg.search, &vb, &vm).unwrap();
        let a_after = loss_at(&state, &vb, &vm);

        if w_after <= w_before && a_after <= a_before {
            held += 1;
        } else {
            details.push(format!("seed {seed}: w {w_before} -> {w_after}, alpha {a_before} -> {a_after}"));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = held == 10 && elapsed < 300.0;
    report(
        5,
        "bilevel descent sanity",
        ok,
        &format!("{held}/10 seeds non-increasing at lr {lr}, {elapsed:.1} s (limit 300 s)"),
    );
    assert!(ok, "{details:?}");
}

#[test]
fn c06_kendall_tau_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut b = a.clone();
        b.shuffle(&mut rng);
        if kendall_tau(&a, &b).unwrap() != kendall_tau_pairs(&a, &b).unwrap() {
            mismatches += 1;
        }
    }
    let small = kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let ok = mismatches == 0 && small == 1.0 / 3.0 && elapsed < 10.0;
    report(
        6,
        "kendall tau oracle",
        ok,
        &format!("1000 permutations, {mismatches} mismatches; tau([1,2,3],[1,3,2]) = {small}; {elapsed:.2} s (limit 10 s)"),
    );
    assert!(ok);
}

/// The desk-scale CIFAR-10 search configuration.
fn cifar_config(root: &Path, seed: u64, ratio: f64, hierarchical: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.root = Some(root.to_path_buf());
    cfg.data.search_images = 10_000;
    cfg.supernet.num_cells = 5;
    cfg.search.epochs = 25;
    cfg.search.mask_ratio = ratio;
    cfg.search.seed = seed;
    cfg.decoder.use_hierarchical = hierarchical;
    cfg
}

fn skip_count(root: &Path, work: &Path, seed: u64, ratio: f64, hierarchical: bool) -> usize {
    let cfg = cifar_config(root, seed, ratio, hierarchical);
    let dir = work.join(format!("seed{seed}_ratio{ratio}_hd{hierarchical}"));
    cmd_search(&cfg, &dir, FRESH).unwrap().skip_count_normal
}

#[test]
fn c07_collapse_reproduction() {
    let name = "collapse reproduction";
    let Some(root) = data_root() else { return blocked(7, name) };
    let tmp = tempfile::tempdir().unwrap();
    let mut with_hd = Vec::new();
    let mut without = Vec::new();
    for seed in 0..3 {
        with_hd.push(skip_count(&root, tmp.path(), seed, 0.2, true) as f64);
        without.push(skip_count(&root, tmp.path(), seed, 0.2, false) as f64);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ordered = with_hd.iter().zip(&without).filter(|(h, f)| f >= h).count();
    let ok = mean(&without) >= mean(&with_hd) && mean(&with_hd) <= 3.0 && ordered >= 2;
    report(
        7,
        name,
        ok,
        &format!("skips without HD {without:?}, with HD {with_hd:?}; ordering held in {ordered}/3 seeds"),
    );
    assert!(ok);
}

#[test]
fn c08_ratio_robustness() {
    let name = "ratio robustness with HD";
    let Some(root) = data_root() else { return blocked(8, name) };
    let tmp = tempfile::tempdir().unwrap();
    let counts: Vec<(f64, usize)> = [0.2, 0.4, 0.6, 0.8]
        .iter()
        .map(|&r| (r, skip_count(&root, tmp.path(), 0, r, true)))
        .collect();
    let ok = counts.iter().all(|&(_, s)| s <= 3);
    report(8, name, ok, &format!("(ratio, skips) {counts:?}, bound 3"));
    assert!(ok);
}

#[test]
fn c09_correlation_study() {
    let name = "correlation study";
    let Some(root) = data_root() else { return blocked(9, name) };
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.data.root = Some(root);
    cfg.supernet = SupernetConfig::bench201(5, 16, cfg.analysis.bench_op_set.clone());
    cfg.supernet.num_nodes = cfg.analysis.bench_nodes;
    cfg.analysis.sample_n = 20;
    let search = tmp.path().join("search");
    cmd_search(&cfg, &search, FRESH).unwrap();
    let bench = tmp.path().join("bench");
    let summary = cmd_bench(&cfg, &bench, FRESH).unwrap();
    let r = cmd_analyze(&search, &bench.join(BENCH_FILE), &tmp.path().join("analysis"), FRESH).unwrap();
    let ok = summary.trained >= 20 && r.tau > 0.0 && r.p_value < 0.05;
    report(
        9,
        name,
        ok,
        &format!("{} models, tau {:.3}, p {:.4} (need > 0, < 0.05)", r.n_models, r.tau, r.p_value),
    );
    assert!(ok);
}

#[test]
fn c10_end_to_end_pipeline() {
    let name = "end-to-end pipeline";
    let Some(root) = data_root() else { return blocked(10, name) };
    let tmp = tempfile::tempdir().unwrap();
    let cfg = cifar_config(&root, 0, 0.5, true);
    let search = tmp.path().join("search");
    cmd_search(&cfg, &search, FRESH).unwrap();
    let g = cmd_derive(&search).unwrap();
    let space = cfg.supernet.space().unwrap();
    assert!(g.ensure_valid(&space).is_ok());
    let searched = cmd_retrain(&cfg, &search.join(GENOTYPE_FILE), &tmp.path().join("retrain"), FRESH).unwrap();

    assert_eq!(space.topology(), Topology::Darts);
    let skip_cell = || -> Vec<Vec<(OperationKind, usize)>> {
        (0..cfg.supernet.num_nodes)
            .map(|i| vec![(OperationKind::SkipConnect, 0), (OperationKind::SkipConnect, i + 1)])
            .collect()
    };
    let baseline = Genotype::new(skip_cell(), skip_cell());
    let path = tmp.path().join("all_skip.json");
    fs::write(&path, baseline.to_canonical_json()).unwrap();
    let base = cmd_retrain(&cfg, &path, &tmp.path().join("baseline"), FRESH).unwrap();
    let gap = 100.0 * (searched.result.final_accuracy - base.result.final_accuracy);
    let ok = gap >= 2.0;
    report(
        10,
        name,
        ok,
        &format!(
            "searched {:.2}% vs all-skip {:.2}% (gap {gap:.2} points, need >= 2)",
            100.0 * searched.result.final_accuracy,
            100.0 * base.result.final_accuracy
        ),
    );
    assert!(ok);
}

#[test]
fn c11_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_darts();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cmd_search(&cfg, &a, FRESH).unwrap();
    cmd_search(&cfg, &b, FRESH).unwrap();
    let differing: Vec<&str> = [GENOTYPE_FILE, "metrics.jsonl", "alpha.jsonl"]
        .into_iter()
        .filter(|f| fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap())
        .collect();
    let ok = differing.is_empty();
    report(
        11,
        "reproducibility",
        ok,
        &format!("genotype, metric and alpha logs of two runs; differing files {differing:?}"),
    );
    assert!(ok);
}
