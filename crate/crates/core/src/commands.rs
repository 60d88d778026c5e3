//! Command implementations behind the CLI. Each command owns one output
//! directory and refuses to write into a non-empty one unless asked to
//! overwrite or resume.
//!
//! Search directory layout:
//!
//! ```text
//! config.json      the validated configuration
//! run.json         config hash, genotype hash, decoder mode, step count
//! checkpoints/     step_<n>.json + step_<n>.bin
//! metrics.jsonl    one line per iteration
//! alpha.jsonl      architecture parameters at every epoch boundary
//! genotype.json    the derived architecture
//! report/          collapse.json, skip_dominance.svg
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::analysis::{build_micro_bench, correlation_report, rank_by_reconstruction, tau_bar_svg, MicroBenchEntry, RankingReport};
use crate::checkpoint::{latest_checkpoint, load_checkpoint, save_checkpoint};
use crate::collapse::{collapse_report, dominance_svg, CollapseReport, DEFAULT_COLLAPSE_THRESHOLD};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{load_cifar10_test, load_cifar10_train, synthetic, ImageSet, LabeledSet, Normalizer};
use crate::error::{Error, Result};
use crate::io::{read_json_lines, read_to_string, write_atomic, write_json, JsonLines};
use crate::masking::MaskSpec;
use crate::model::ScoreSetup;
use crate::objective::ScoreRecord;
use crate::retrain::{build_discrete_network, train_from_scratch, RetrainResult};
use crate::search::{run_search, AlphaSnapshot, SearchEvent, SearchState, StepMetrics};
use crate::search_space::{Genotype, SearchSpace};

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ALPHA_FILE: &str = "alpha.jsonl";
pub const GENOTYPE_FILE: &str = "genotype.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_DIR: &str = "report";

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub overwrite: bool,
    pub resume: bool,
}

/// Makes `dir` ready for a command. Returns true when resuming into
/// existing content.
fn prepare_dir(dir: &Path, opts: RunOptions) -> Result<bool> {
    let occupied = dir.exists()
        && std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
    if occupied {
        if opts.resume {
            return Ok(true);
        }
        if !opts.overwrite {
            return Err(Error::Usage(format!(
                "{} is not empty; pass --overwrite to replace it or --resume to continue",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(false)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig, resuming: bool) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    if resuming && path.exists() {
        let old = ExperimentConfig::load(&path)?;
        if old.hash() != cfg.hash() {
            return Err(Error::Usage(format!(
                "cannot resume: {} holds a different configuration ({} vs {})",
                path.display(),
                old.hash(),
                cfg.hash()
            )));
        }
        return Ok(());
    }
    write_json(&path, cfg)
}

/// Unlabeled images for the search.
pub fn search_images(cfg: &ExperimentConfig) -> Result<ImageSet> {
    let d = &cfg.data;
    let set = match d.dataset {
        DatasetKind::Cifar10 => load_cifar10_train(data_root(cfg)?)?,
        DatasetKind::Synthetic => synthetic(d.search_images, d.synthetic_classes, d.synthetic_size, d.synthetic_seed)?,
    };
    Ok(set.take(d.search_images).images)
}

/// Labeled training and test sets.
pub fn labeled_sets(cfg: &ExperimentConfig) -> Result<(LabeledSet, LabeledSet)> {
    let d = &cfg.data;
    match d.dataset {
        DatasetKind::Cifar10 => {
            let root = data_root(cfg)?;
            Ok((load_cifar10_train(root)?.take(d.train_images), load_cifar10_test(root)?.take(d.test_images)))
        }
        DatasetKind::Synthetic => Ok((
            synthetic(d.train_images, d.synthetic_classes, d.synthetic_size, d.synthetic_seed)?,
            synthetic(d.test_images, d.synthetic_classes, d.synthetic_size, d.synthetic_seed.wrapping_add(1))?,
        )),
    }
}

fn data_root(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.data
        .root
        .as_deref()
        .ok_or_else(|| Error::Validation(vec!["data.root: missing dataset path".into()]))
}

/// Keeps only log lines whose `step` satisfies `keep`; kept lines are
/// preserved byte for byte.
fn filter_log(path: &Path, keep: impl Fn(u64) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = read_to_string(path)?;
    let mut out = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("step").and_then(|s| s.as_u64()).is_some_and(&keep) {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub config_hash: String,
    pub genotype_hash: String,
    pub decoder: String,
    pub steps: u64,
    pub skip_count_normal: usize,
    pub skip_count_reduction: usize,
    pub collapsed: bool,
}

/// Runs a search into `dir`.
pub fn cmd_search(cfg: &ExperimentConfig, dir: &Path, opts: RunOptions) -> Result<SearchSummary> {
    cfg.validate()?;
    let images = search_images(cfg)?;
    let resuming = prepare_dir(dir, opts)?;
    write_config(dir, cfg, resuming)?;
    let hash = cfg.hash();
    let setup = cfg.search_setup();
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    let (metrics_path, alpha_path) = (dir.join(METRICS_FILE), dir.join(ALPHA_FILE));

    let resume: Option<SearchState> = match (resuming, latest_checkpoint(&ckpt_dir)?) {
        (true, Some(path)) => Some(load_checkpoint(&path, &setup, &hash)?),
        _ => None,
    };
    let done = resume.as_ref().map_or(0, |s| s.step);
    if resume.is_some() {
        log::info!("resuming at step {done}");
        filter_log(&metrics_path, |s| s < done)?;
        filter_log(&alpha_path, |s| s <= done)?;
    } else {
        JsonLines::create(&metrics_path)?;
        JsonLines::create(&alpha_path)?;
    }
    let mut metrics = JsonLines::append(&metrics_path)?;
    let mut alphas = JsonLines::append(&alpha_path)?;
    let seed = cfg.search.seed;
    let every = cfg.search.checkpoint_every;
    let mut last_saved = done;
    let mut on_event = |ev: SearchEvent| -> Result<()> {
        match ev {
            SearchEvent::Step(state, m) => {
                metrics.write(m)?;
                if every > 0 && state.step % every == 0 {
                    metrics.flush()?;
                    save_checkpoint(&ckpt_dir, state, &hash, seed)?;
                    last_saved = state.step;
                }
                if m.step % 50 == 0 {
                    log::info!("step {} epoch {} train {:.4} val {:.4}", m.step, m.epoch, m.train_loss, m.val_loss);
                }
            }
            SearchEvent::EpochEnd(state, snap) => {
                alphas.write(snap)?;
                alphas.flush()?;
                metrics.flush()?;
                if state.step > 0 && state.step != last_saved {
                    save_checkpoint(&ckpt_dir, state, &hash, seed)?;
                    last_saved = state.step;
                }
            }
        }
        Ok(())
    };
    let out = run_search(&setup, &images, resume, &mut on_event)?;
    metrics.flush()?;
    if out.state.step != last_saved {
        save_checkpoint(&ckpt_dir, &out.state, &hash, seed)?;
    }
    write_atomic(&dir.join(GENOTYPE_FILE), out.genotype.to_canonical_json().as_bytes())?;

    let history: Vec<AlphaSnapshot> = read_json_lines(&alpha_path)?;
    let report = collapse_report(&out.genotype, out.state.model.space(), &history, DEFAULT_COLLAPSE_THRESHOLD)?;
    write_report(dir, &hash, &report)?;
    let summary = SearchSummary {
        config_hash: hash,
        genotype_hash: out.genotype.hash(),
        decoder: if cfg.decoder.use_hierarchical { "hierarchical" } else { "flat" }.into(),
        steps: out.state.step,
        skip_count_normal: report.skip_count_normal,
        skip_count_reduction: report.skip_count_reduction,
        collapsed: report.collapsed,
    };
    write_json(&dir.join(RUN_FILE), &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

fn write_report(dir: &Path, hash: &str, report: &CollapseReport) -> Result<()> {
    let rdir = dir.join(REPORT_DIR);
    write_json(
        &rdir.join("collapse.json"),
        &Stamped {
            config_hash: hash,
            body: report,
        },
    )?;
    write_atomic(&rdir.join("skip_dominance.svg"), dominance_svg(&report.dominance).as_bytes())
}

/// Loads a search directory's configuration and latest checkpoint.
pub fn load_search_dir(dir: &Path) -> Result<(ExperimentConfig, SearchState)> {
    let cfg_path = dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(Error::Usage(format!("{} is not a search directory (no {CONFIG_FILE})", dir.display())));
    }
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let ckpt = latest_checkpoint(&dir.join(CHECKPOINT_DIR))?
        .ok_or_else(|| Error::Usage(format!("no checkpoint under {}", dir.join(CHECKPOINT_DIR).display())))?;
    let state = load_checkpoint(&ckpt, &cfg.search_setup(), &cfg.hash())?;
    Ok((cfg, state))
}

/// Derives the genotype of the latest checkpoint in a search directory.
pub fn cmd_derive(search_dir: &Path) -> Result<Genotype> {
    let (_, state) = load_search_dir(search_dir)?;
    state.genotype()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub config_hash: String,
    #[serde(flatten)]
    pub result: RetrainResult,
}

/// Trains the genotype stored at `genotype_path` from scratch.
pub fn cmd_retrain(cfg: &ExperimentConfig, genotype_path: &Path, dir: &Path, opts: RunOptions) -> Result<RetrainReport> {
    cfg.validate()?;
    let genotype = Genotype::from_json(&read_to_string(genotype_path)?)?;
    let space = cfg.supernet.space()?;
    let (train, test) = labeled_sets(cfg)?;
    prepare_dir(dir, RunOptions { resume: false, ..opts })?;
    write_config(dir, cfg, false)?;
    let mut net = build_discrete_network(&genotype, &space, &cfg.retrain, train.num_classes)?;
    let mut curve = JsonLines::create(&dir.join("retrain_curve.jsonl"))?;
    let mut write_err = None;
    let result = train_from_scratch(&mut net, &train, &test, &cfg.retrain, &mut |rec| {
        log::info!("epoch {} test accuracy {:.4}", rec.epoch, rec.test_accuracy);
        if let Err(e) = curve.write(rec).and_then(|_| curve.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let report = RetrainReport {
        config_hash: cfg.hash(),
        result,
    };
    write_json(&dir.join("retrain.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config_hash: String,
    pub requested: usize,
    pub trained: usize,
    pub partial: bool,
}

pub const BENCH_FILE: &str = "bench.jsonl";

pub fn bench_space(cfg: &ExperimentConfig) -> Result<SearchSpace> {
    SearchSpace::bench201(cfg.analysis.bench_nodes, cfg.analysis.bench_op_set.clone())
}

/// Builds (or continues) the micro-benchmark in `dir`.
pub fn cmd_bench(cfg: &ExperimentConfig, dir: &Path, opts: RunOptions) -> Result<BenchSummary> {
    cfg.validate()?;
    let (train, test) = labeled_sets(cfg)?;
    let resuming = prepare_dir(dir, opts)?;
    write_config(dir, cfg, resuming)?;
    let a = &cfg.analysis;
    let bench = build_micro_bench(
        &bench_space(cfg)?,
        a.sample_n,
        &cfg.retrain,
        &train,
        &test,
        a.bench_seed,
        a.bench_budget_secs.map(Duration::from_secs),
        Some(&dir.join(BENCH_FILE)),
    )?;
    let summary = BenchSummary {
        config_hash: cfg.hash(),
        requested: bench.requested,
        trained: bench.entries.len(),
        partial: bench.partial,
    };
    write_json(&dir.join("bench.json"), &summary)?;
    Ok(summary)
}

/// Scores every micro-benchmark genotype with the supernet of `search_dir`
/// and correlates the scores with ground-truth accuracy.
pub fn cmd_analyze(search_dir: &Path, bench_path: &Path, out_dir: &Path, opts: RunOptions) -> Result<RankingReport> {
    if !bench_path.exists() {
        return Err(Error::Usage(format!(
            "no micro-benchmark at {}; build one with `maskarch bench` first",
            bench_path.display()
        )));
    }
    let bench: Vec<MicroBenchEntry> = read_json_lines(bench_path)?;
    if bench.len() < 2 {
        return Err(Error::Usage(format!(
            "{} holds {} trained models; at least 2 are needed",
            bench_path.display(),
            bench.len()
        )));
    }
    let (cfg, state) = load_search_dir(search_dir)?;
    prepare_dir(out_dir, RunOptions { resume: false, ..opts })?;
    let (_, test) = labeled_sets(&cfg)?;
    let images = test.images.subset(&(0..cfg.analysis.score_images.min(test.len())).collect::<Vec<_>>());
    let setup = ScoreSetup {
        mask: MaskSpec::new(images.height, images.width, cfg.search.patch_size, cfg.search.mask_ratio)?,
        normalizer: Normalizer::fit(&images),
        images: &images,
        mask_seed: cfg.analysis.mask_seed,
        batch_size: cfg.analysis.score_batch_size,
    };
    let genotypes: Vec<(String, Genotype)> = bench.iter().map(|e| (e.model_id.clone(), e.genotype.clone())).collect();
    let scores = rank_by_reconstruction(&state.model, &genotypes, &setup)?;
    let report = correlation_report(&bench, &scores, cfg.analysis.permutations, cfg.analysis.bench_seed)?;
    let hash = cfg.hash();
    let mut sink = JsonLines::create(&out_dir.join("scores.jsonl"))?;
    for s in &scores {
        sink.write(s)?;
    }
    sink.flush()?;
    write_json(
        &out_dir.join("correlation.json"),
        &Stamped {
            config_hash: &hash,
            body: &report,
        },
    )?;
    let label = match cfg.data.dataset {
        DatasetKind::Cifar10 => "cifar10",
        DatasetKind::Synthetic => "synthetic",
    };
    write_atomic(&out_dir.join("tau.svg"), tau_bar_svg(&[(label.into(), report.tau)]).as_bytes())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mask_ratio: f64,
    pub patch_size: usize,
    pub dir: PathBuf,
    pub skip_count_normal: Option<usize>,
    pub genotype_hash: Option<String>,
    pub retrain_accuracy: Option<f64>,
    pub error: Option<String>,
}

pub fn sweep_cell_dir(ratio: f64, patch: usize) -> String {
    format!("ratio{ratio}_patch{patch}")
}

/// One search per (mask ratio, patch size) cell; failures are recorded in
/// the table and do not stop the sweep.
pub fn cmd_sweep(cfg: &ExperimentConfig, dir: &Path, opts: RunOptions) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let resuming = prepare_dir(dir, opts)?;
    write_config(dir, cfg, resuming)?;
    let mut rows = Vec::new();
    for &ratio in &cfg.sweep.mask_ratios {
        for &patch in &cfg.sweep.patch_sizes {
            let mut cell = cfg.clone();
            cell.search.mask_ratio = ratio;
            cell.search.patch_size = patch;
            let cell_dir = dir.join(sweep_cell_dir(ratio, patch));
            let mut row = SweepRow {
                mask_ratio: ratio,
                patch_size: patch,
                dir: cell_dir.clone(),
                skip_count_normal: None,
                genotype_hash: None,
                retrain_accuracy: None,
                error: None,
            };
            let cell_opts = RunOptions {
                overwrite: opts.overwrite,
                resume: opts.resume,
            };
            match cmd_search(&cell, &cell_dir, cell_opts) {
                Ok(s) => {
                    row.skip_count_normal = Some(s.skip_count_normal);
                    row.genotype_hash = Some(s.genotype_hash);
                    if cfg.sweep.retrain {
                        match cmd_retrain(&cell, &cell_dir.join(GENOTYPE_FILE), &cell_dir.join("retrain"), RunOptions {
                            overwrite: true,
                            resume: false,
                        }) {
                            Ok(r) => row.retrain_accuracy = Some(r.result.final_accuracy),
                            Err(e) => row.error = Some(format!("retrain: {e}")),
                        }
                    }
                }
                Err(e) => {
                    log::warn!("sweep cell ratio {ratio} patch {patch} failed: {e}");
                    row.error = Some(e.to_string());
                }
            }
            rows.push(row);
        }
    }
    write_json(&dir.join("sweep.json"), &rows)?;
    let mut tsv = String::from("mask_ratio\tpatch_size\tskip_count_normal\tretrain_accuracy\terror\n");
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    for r in &rows {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.mask_ratio,
            r.patch_size,
            opt(r.skip_count_normal.map(|v| v.to_string())),
            opt(r.retrain_accuracy.map(|v| format!("{v:.4}"))),
            opt(r.error.as_ref().map(|e| e.replace('\n', " "))),
        ));
    }
    write_atomic(&dir.join("sweep.tsv"), tsv.as_bytes())?;
    Ok(rows)
}

/// Reads a search directory's metric log.
pub fn read_metrics(dir: &Path) -> Result<Vec<StepMetrics>> {
    read_json_lines(&dir.join(METRICS_FILE))
}

/// Reads the labeled scores written by `cmd_analyze`.
pub fn read_scores(dir: &Path) -> Result<Vec<ScoreRecord>> {
    read_json_lines(&dir.join("scores.jsonl"))
}
