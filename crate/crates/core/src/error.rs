//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by dataset I/O, validation, training and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Malformed or inconsistent dataset contents (bad labels, byte-length
    /// mismatches, degenerate rows).
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    /// Rejected configuration values.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Matrix or vector dimensions that do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An operation received an empty input it cannot work with.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Training-data provenance rules were violated.
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    /// Non-finite losses, undefined cosines, invalid distributions.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Two reports that cannot be compared.
    #[error("metric mismatch: {0}")]
    MetricMismatch(String),

    /// A protocol run failed; carries the run seed for diagnosis.
    #[error("run with seed {seed} failed: {source}")]
    Run {
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
