use std::path::PathBuf;

use maskarch_tensor::TensorError;
use thiserror::Error;

use crate::search_space::CellKind;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("unknown edge {edge} in {kind} cell (cell has {num_edges} edges)")]
    UnknownEdge {
        kind: CellKind,
        edge: usize,
        num_edges: usize,
    },

    #[error("invalid search space: {0}")]
    SearchSpace(String),

    #[error("cannot derive genotype: {0}")]
    Derive(String),

    #[error("invalid genotype: {}", .0.join("; "))]
    Genotype(Vec<String>),

    #[error("genotype not expressible in supernet: {0}")]
    NotExpressible(String),

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("operation {op} produced a non-finite value")]
    NonFiniteOp { op: String },

    #[error("{phase} diverged at step {step}: {detail}")]
    Divergence {
        phase: &'static str,
        step: u64,
        detail: String,
    },

    #[error("configuration invalid:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("{0}")]
    Usage(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for validation problems, 3 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Genotype(_) | Error::Usage(_) => 2,
            Error::Divergence { .. } | Error::NonFiniteOp { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
