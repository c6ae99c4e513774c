use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A parameter update produced NaN or infinity.
    #[error("training diverged on device {device} at step {step}")]
    Divergence { device: usize, step: u64 },

    #[error("insufficient history: {0}")]
    InsufficientHistory(&'static str),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("training period incomplete: {0}")]
    Training(String),

    #[error("metric error: {0}")]
    Metric(&'static str),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than by
    /// the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::DimensionMismatch { .. }
                | Error::Schema(_)
                | Error::Unsupported(_)
                | Error::Io { .. }
                | Error::Csv { .. }
                | Error::Json { .. }
        )
    }
}
