use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use maskarch::commands::{self, RunOptions, GENOTYPE_FILE};
use maskarch::config::ExperimentConfig;
use maskarch::search::Order;
use maskarch::{Error, Result};

#[derive(Parser)]
#[command(name = "maskarch", version, about = "Label-free differentiable architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    First,
    Second,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Use the flat (single-level) decoder.
    #[arg(long)]
    no_hd: bool,
    #[arg(long, value_enum)]
    order: Option<OrderArg>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
    /// Compute device; only `cpu` is available.
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search and write checkpoints, metrics and the genotype.
    Search {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to <output root>/search).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// One search per (mask ratio, patch size) grid cell.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Print the genotype of a search directory's latest checkpoint.
    Derive {
        /// Search directory.
        dir: PathBuf,
        /// Also write the genotype here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a genotype from scratch with labels.
    Retrain {
        #[command(flatten)]
        common: Common,
        /// Genotype file, or a search directory holding genotype.json.
        genotype: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train sampled micro-space genotypes to build a ground-truth table.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Correlate reconstruction scores of a searched supernet with a
    /// micro-benchmark.
    Analyze {
        /// Search directory (its supernet must cover the micro space).
        dir: PathBuf,
        /// Micro-benchmark file (bench.jsonl).
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    if c.device != "cpu" {
        return Err(Error::Usage(format!("device {:?} is not available; only cpu is supported", c.device)));
    }
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env();
    if let Some(s) = c.seed {
        cfg.search.seed = s;
        cfg.retrain.seed = s;
    }
    if let Some(r) = c.mask_ratio {
        cfg.search.mask_ratio = r;
    }
    if let Some(p) = c.patch_size {
        cfg.search.patch_size = p;
    }
    if c.no_hd {
        cfg.decoder.use_hierarchical = false;
    }
    match c.order {
        Some(OrderArg::First) => cfg.search.order = Order::First,
        Some(OrderArg::Second) => cfg.search.order = Order::Second,
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>, default: &str) -> PathBuf {
    out.unwrap_or_else(|| cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs")).join(default))
}

fn print<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn genotype_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(GENOTYPE_FILE)
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search { common, out, resume } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg, out, "search");
            let opts = RunOptions {
                overwrite: common.overwrite,
                resume,
            };
            print(&commands::cmd_search(&cfg, &dir, opts)?)
        }
        Command::Sweep { common, out, resume } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg, out, "sweep");
            let opts = RunOptions {
                overwrite: common.overwrite,
                resume,
            };
            print(&commands::cmd_sweep(&cfg, &dir, opts)?)
        }
        Command::Derive { dir, out } => {
            let g = commands::cmd_derive(&dir)?;
            let json = g.to_canonical_json();
            if let Some(p) = out {
                maskarch::io::write_atomic(&p, json.as_bytes())?;
            }
            print!("{json}");
            Ok(())
        }
        Command::Retrain { common, genotype, out } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg, out, "retrain");
            let opts = RunOptions {
                overwrite: common.overwrite,
                resume: false,
            };
            print(&commands::cmd_retrain(&cfg, &genotype_file(&genotype), &dir, opts)?)
        }
        Command::Bench { common, out, resume } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg, out, "bench");
            let opts = RunOptions {
                overwrite: common.overwrite,
                resume,
            };
            print(&commands::cmd_bench(&cfg, &dir, opts)?)
        }
        Command::Analyze {
            dir,
            bench,
            out,
            overwrite,
        } => {
            let out = out.unwrap_or_else(|| dir.join(commands::REPORT_DIR).join("correlation"));
            let opts = RunOptions {
                overwrite,
                resume: false,
            };
            print(&commands::cmd_analyze(&dir, &bench, &out, opts)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
