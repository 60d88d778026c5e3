//! Experiment configuration: one JSON file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::io::{read_to_string, sha256_hex};
use crate::masking::MaskSpec;
use crate::retrain::RetrainConfig;
use crate::search::{SearchConfig, SearchSetup};
use crate::search_space::OpSet;
use crate::supernet::SupernetConfig;

pub const ENV_DATA_ROOT: &str = "MASKARCH_DATA_ROOT";
pub const ENV_OUTPUT_ROOT: &str = "MASKARCH_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Cifar10,
    /// Procedurally generated images; for smoke runs and tests only.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Directory holding the CIFAR-10 binary batches.
    pub root: Option<PathBuf>,
    /// Unlabeled images used by the search (taken from the training set).
    pub search_images: usize,
    /// Labeled images used for retraining and micro-benchmark training.
    pub train_images: usize,
    pub test_images: usize,
    pub synthetic_size: usize,
    pub synthetic_classes: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Cifar10,
            root: None,
            search_images: 10_000,
            train_images: 10_000,
            test_images: 2_000,
            synthetic_size: 32,
            synthetic_classes: 10,
            synthetic_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn image_size(&self) -> usize {
        match self.dataset {
            DatasetKind::Cifar10 => 32,
            DatasetKind::Synthetic => self.synthetic_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Intermediate nodes of the dense micro-benchmark cell.
    pub bench_nodes: usize,
    pub bench_op_set: OpSet,
    pub sample_n: usize,
    /// Wall-clock budget for building the micro-benchmark.
    pub bench_budget_secs: Option<u64>,
    pub bench_seed: u64,
    pub score_images: usize,
    pub score_batch_size: usize,
    pub mask_seed: u64,
    pub permutations: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bench_nodes: 3,
            bench_op_set: OpSet::micro(),
            sample_n: 30,
            bench_budget_secs: None,
            bench_seed: 0,
            score_images: 256,
            score_batch_size: 32,
            mask_seed: 0,
            permutations: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub mask_ratios: Vec<f64>,
    pub patch_sizes: Vec<usize>,
    /// Retrain every derived genotype and report its accuracy.
    pub retrain: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            mask_ratios: vec![0.1, 0.3, 0.5, 0.7],
            patch_sizes: vec![2, 4, 8, 16],
            retrain: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
    pub supernet: SupernetConfig,
    pub decoder: DecoderConfig,
    pub search: SearchConfig,
    pub retrain: RetrainConfig,
    pub analysis: AnalysisConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(vec![format!("config: {e}")]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?)
    }

    /// Fills unset paths from the environment.
    pub fn apply_env(&mut self) {
        if self.data.root.is_none() {
            self.data.root = std::env::var_os(ENV_DATA_ROOT).map(PathBuf::from);
        }
        if self.output_dir.is_none() {
            self.output_dir = std::env::var_os(ENV_OUTPUT_ROOT).map(PathBuf::from);
        }
    }

    pub fn search_setup(&self) -> SearchSetup {
        SearchSetup {
            supernet: self.supernet.clone(),
            decoder: self.decoder.clone(),
            search: self.search.clone(),
        }
    }

    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let d = &self.data;
        if d.dataset == DatasetKind::Cifar10 && d.root.is_none() {
            p.push(format!("data.root: missing dataset path (set it in the config or via {ENV_DATA_ROOT})"));
        }
        if d.dataset == DatasetKind::Synthetic && (d.synthetic_size == 0 || d.synthetic_classes < 2) {
            p.push("data.synthetic_size must be positive and data.synthetic_classes at least 2".into());
        }
        if d.search_images == 0 {
            p.push("data.search_images must be positive".into());
        }
        p.extend(self.supernet.problems().into_iter().map(|s| format!("supernet: {s}")));
        if self.decoder.embed_width == 0 {
            p.push("decoder.embed_width must be positive".into());
        }
        p.extend(self.search.problems());
        let size = d.image_size();
        if let Err(e) = MaskSpec::new(size, size, self.search.patch_size, self.search.mask_ratio) {
            p.push(format!("search: {e}"));
        }
        p.extend(self.retrain.problems());
        let a = &self.analysis;
        if a.sample_n < 2 {
            p.push("analysis.sample_n must be at least 2".into());
        }
        if a.score_images == 0 || a.score_batch_size == 0 {
            p.push("analysis.score_images and analysis.score_batch_size must be positive".into());
        }
        let s = &self.sweep;
        if s.mask_ratios.is_empty() || s.patch_sizes.is_empty() {
            p.push("sweep: grid must have at least one mask ratio and one patch size".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    /// Hash of everything that affects results (paths excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.data.root = None;
        let value = serde_json::to_value(&c).expect("config serializes");
        sha256_hex(value.to_string().as_bytes())
    }
}
