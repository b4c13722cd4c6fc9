use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Invalid parameters handed to a sampling kernel.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistribError {
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("probability vector sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("concentration vector has no positive entry")]
    EmptySupport,
    #[error("weights contain a negative or non-finite entry")]
    BadWeights,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("no documents survive preprocessing")]
    NoDocuments,
    #[error("all timestamps are identical; cannot cut {0} slices")]
    ZeroWidthRange(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corpus directory {0}: {1}")]
    Layout(PathBuf, String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training slice {0} is empty")]
    EmptySlice(usize),
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("state invariant violated: {0}")]
    Invariant(String),
    #[error("non-finite value in {variable} at iteration {iteration}")]
    NonFinite { iteration: usize, variable: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Distrib(#[from] DistribError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ModelError {
    /// True for failures caused by numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ModelError::NonFinite { .. } | ModelError::Invariant(_) | ModelError::Distrib(_)
        )
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
