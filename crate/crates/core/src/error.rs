use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrdError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("failed to load weights from {path}: {reason}")]
    WeightLoad { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("ingestion error at {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid training data: {0}")]
    Data(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TrdError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn ingestion(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        TrdError::Ingestion {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = TrdError> = std::result::Result<T, E>;
