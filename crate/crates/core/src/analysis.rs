//! Ranking-correlation study: ground-truth accuracies of a sampled
//! micro-benchmark against reconstruction scores of weight-sharing child
//! models.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::io::{read_json_lines, JsonLines};
use crate::model::{calibrate_bn, reconstruction_score, MaskedModel, ScoreSetup};
use crate::objective::ScoreRecord;
use crate::retrain::{build_discrete_network, train_from_scratch, RetrainConfig};
use crate::search_space::{enumerate_dense, Genotype, SearchSpace};
use crate::seeding::{derive_seed, rng_for, STREAM_PERMUTATION, STREAM_SAMPLE};
use crate::supernet::genotype_mixing;

/// Positions sorted by `(value, index)`, so equal values are ordered by
/// their index (the model id).
fn tie_broken_ranks(v: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]).then(i.cmp(&j)));
    let mut rank = vec![0; v.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

pub fn has_ties(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).any(|w| w[0] == w[1])
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!("rankings differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Usage("Kendall tau needs at least two models".into()));
    }
    Ok(())
}

fn merge_count(v: &mut [usize], buf: &mut Vec<usize>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            buf.push(v[i]);
            i += 1;
        } else {
            buf.push(v[j]);
            inv += (mid - i) as u64;
            j += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

/// Kendall's tau, `(concordant − discordant) / (n(n−1)/2)`, of two score
/// vectors. Ties are broken by position; use [`has_ties`] to detect them.
/// Runs in O(n log n).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    let (ra, rb) = (tie_broken_ranks(a), tie_broken_ranks(b));
    let n = a.len();
    let mut by_a = vec![0; n];
    for i in 0..n {
        by_a[ra[i]] = rb[i];
    }
    let discordant = merge_count(&mut by_a, &mut Vec::with_capacity(n));
    let total = (n * (n - 1) / 2) as u64;
    Ok((total as f64 - 2.0 * discordant as f64) / total as f64)
}

/// Quadratic pair-counting reference for [`kendall_tau`].
pub fn kendall_tau_pairs(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    let n = a.len();
    let before = |v: &[f64], i: usize, j: usize| v[i] < v[j] || (v[i] == v[j] && i < j);
    let (mut c, mut d) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            if before(a, i, j) == before(b, i, j) {
                c += 1;
            } else {
                d += 1;
            }
        }
    }
    Ok((c - d) as f64 / (c + d) as f64)
}

/// One-sided permutation p-value of a positive association:
/// `(1 + #{τ_perm ≥ τ_obs}) / (1 + permutations)`.
pub fn permutation_p_value(a: &[f64], b: &[f64], permutations: usize, seed: u64) -> Result<f64> {
    let observed = kendall_tau(a, b)?;
    let mut rng = rng_for(seed, &[STREAM_PERMUTATION]);
    let mut shuffled = b.to_vec();
    let mut hits = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        if kendall_tau(a, &shuffled)? >= observed - 1e-12 {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + permutations) as f64)
}

/// Scores child models (supernet weights restricted to each genotype's
/// operations) and returns them best first. Batch-norm statistics are
/// re-estimated per child on the scoring images; the supernet itself is
/// left untouched.
pub fn rank_by_reconstruction(
    supernet: &MaskedModel,
    genotypes: &[(String, Genotype)],
    setup: &ScoreSetup,
) -> Result<Vec<ScoreRecord>> {
    let mut child = supernet.clone();
    let mut records = Vec::with_capacity(genotypes.len());
    for (id, g) in genotypes {
        let mixing = genotype_mixing(child.space(), g).map_err(|e| match e {
            Error::Genotype(p) => Error::NotExpressible(format!("{id}: {}", p.join("; "))),
            other => other,
        })?;
        calibrate_bn(&mut child, &mixing, setup)?;
        records.push(ScoreRecord {
            model_id: id.clone(),
            score: reconstruction_score(&child, &mixing, setup)?,
            n_images: setup.images.len(),
            mask_seed: setup.mask_seed,
        });
    }
    records.sort_by(|x, y| y.score.total_cmp(&x.score).then_with(|| x.model_id.cmp(&y.model_id)));
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: u64,
    pub train_images: usize,
    pub test_images: usize,
    pub best_accuracy: f64,
    pub params: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroBenchEntry {
    pub model_id: String,
    pub genotype: Genotype,
    pub ground_truth_accuracy: f64,
    pub reconstruction_score: Option<f64>,
    pub training: TrainingMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroBench {
    pub entries: Vec<MicroBenchEntry>,
    /// True when the time budget ran out before every sample was trained.
    pub partial: bool,
    pub requested: usize,
}

/// `sample_n` distinct genotypes of a dense cell space, in sampling order;
/// the whole space is returned when `sample_n` equals its size.
pub fn sample_genotypes(space: &SearchSpace, sample_n: usize, seed: u64) -> Result<Vec<(String, Genotype)>> {
    let all = enumerate_dense(&space.normal)?;
    if sample_n > all.len() {
        return Err(Error::Usage(format!("sample of {sample_n} exceeds the {} genotypes of the space", all.len())));
    }
    let picks = sample(&mut rng_for(seed, &[STREAM_SAMPLE]), all.len(), sample_n);
    Ok(picks
        .into_iter()
        .map(|i| (format!("arch-{i:05}"), Genotype::new(all[i].clone(), Vec::new())))
        .collect())
}

/// Training seed of bench entry `model_id`.
pub fn entry_seed(seed: u64, model_id: &str) -> u64 {
    let n: u64 = model_id.trim_start_matches("arch-").parse().unwrap_or(0);
    derive_seed(seed, &[STREAM_SAMPLE, n])
}

/// Trains sampled genotypes from scratch and records their accuracy.
/// Entries already present in `store` (JSON lines) are reused, so an
/// interrupted build resumes where it stopped. When `budget` elapses the
/// result is flagged partial.
pub fn build_micro_bench(
    space: &SearchSpace,
    sample_n: usize,
    cfg: &RetrainConfig,
    train: &LabeledSet,
    test: &LabeledSet,
    seed: u64,
    budget: Option<Duration>,
    store: Option<&Path>,
) -> Result<MicroBench> {
    let picks = sample_genotypes(space, sample_n, seed)?;
    let mut done: Vec<MicroBenchEntry> = match store {
        Some(p) if p.exists() => read_json_lines(p)?,
        _ => Vec::new(),
    };
    let mut sink = store.map(JsonLines::append).transpose()?;
    let start = Instant::now();
    let mut entries = Vec::with_capacity(sample_n);
    let mut partial = false;
    for (id, g) in picks {
        if let Some(pos) = done.iter().position(|e| e.model_id == id) {
            entries.push(done.swap_remove(pos));
            continue;
        }
        if budget.is_some_and(|b| start.elapsed() >= b) {
            partial = true;
            break;
        }
        let t0 = Instant::now();
        let run_cfg = RetrainConfig {
            seed: entry_seed(seed, &id),
            ..cfg.clone()
        };
        let mut net = build_discrete_network(&g, space, &run_cfg, train.num_classes)?;
        let result = train_from_scratch(&mut net, train, test, &run_cfg, &mut |_| {})?;
        let entry = MicroBenchEntry {
            model_id: id,
            genotype: g,
            ground_truth_accuracy: result.final_accuracy,
            reconstruction_score: None,
            training: TrainingMeta {
                seed: run_cfg.seed,
                epochs: run_cfg.epochs,
                train_images: train.len(),
                test_images: test.len(),
                best_accuracy: result.best_accuracy,
                params: result.size.total_params,
                seconds: t0.elapsed().as_secs_f64(),
            },
        };
        if let Some(s) = sink.as_mut() {
            s.write(&entry)?;
            s.flush()?;
        }
        log::info!("{} accuracy {:.4}", entry.model_id, entry.ground_truth_accuracy);
        entries.push(entry);
    }
    Ok(MicroBench {
        entries,
        partial,
        requested: sample_n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub tau: f64,
    pub n_models: usize,
    pub p_value: f64,
    pub permutations: usize,
    pub ties: bool,
    /// Model ids best first by ground-truth accuracy.
    pub accuracy_ranking: Vec<String>,
    /// Model ids best first by reconstruction score.
    pub reconstruction_ranking: Vec<String>,
}

fn ranking(ids: &[String], v: &[f64]) -> Vec<String> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
    order.into_iter().map(|i| ids[i].clone()).collect()
}

/// Correlates accuracies with the scores in `scores` (matched by model id).
pub fn correlation_report(
    bench: &[MicroBenchEntry],
    scores: &[ScoreRecord],
    permutations: usize,
    seed: u64,
) -> Result<RankingReport> {
    if bench.is_empty() {
        return Err(Error::Usage("micro-benchmark is empty".into()));
    }
    let mut ids = Vec::new();
    let (mut acc, mut rec) = (Vec::new(), Vec::new());
    for e in bench {
        let s = scores
            .iter()
            .find(|s| s.model_id == e.model_id)
            .ok_or_else(|| Error::Usage(format!("no reconstruction score for {}", e.model_id)))?;
        ids.push(e.model_id.clone());
        acc.push(e.ground_truth_accuracy);
        rec.push(s.score);
    }
    let ties = has_ties(&acc) || has_ties(&rec);
    if ties {
        log::warn!("tied values present; ties are broken by model order");
    }
    Ok(RankingReport {
        tau: kendall_tau(&acc, &rec)?,
        n_models: bench.len(),
        p_value: permutation_p_value(&acc, &rec, permutations, seed)?,
        permutations,
        ties,
        accuracy_ranking: ranking(&ids, &acc),
        reconstruction_ranking: ranking(&ids, &rec),
    })
}

/// Bar chart of tau per labelled dataset.
pub fn tau_bar_svg(bars: &[(String, f64)]) -> String {
    let (w, h, pad) = (120.0 * bars.len().max(1) as f64 + 80.0, 300.0, 40.0);
    let zero = h / 2.0;
    let scale = h / 2.0 - pad;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="20" font-size="12">Kendall tau: accuracy vs reconstruction score</text>"#);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{zero}" x2="{}" y2="{zero}" stroke="black"/>"#, w - pad);
    for (i, (label, tau)) in bars.iter().enumerate() {
        let x = pad + 20.0 + 120.0 * i as f64;
        let bh = tau.abs() * scale;
        let y = if *tau >= 0.0 { zero - bh } else { zero };
        let _ = writeln!(s, r##"<rect x="{x}" y="{y:.1}" width="60" height="{bh:.1}" fill="#4a7ab5"/>"##);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" font-size="11">{label} ({tau:.3})</text>"#, h - 10.0);
    }
    s.push_str("</svg>\n");
    s
}
