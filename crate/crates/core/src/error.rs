use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CddsaError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("ingestion failed for {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite loss term `{term}` ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] cddsa_autograd::Error),
}

impl CddsaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CddsaError::Io { path: path.into(), source }
    }

    pub fn ingest(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CddsaError::Ingest { path: path.into(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, CddsaError>;
