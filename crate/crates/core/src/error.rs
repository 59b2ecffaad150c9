use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(
        "noise calibration failed: target epsilon {target_epsilon} unreachable for sigma in [{sigma_min}, {sigma_max}]"
    )]
    CalibrationFailure {
        target_epsilon: f64,
        sigma_min: f64,
        sigma_max: f64,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingFailure { epoch: usize },

    #[error("arm `{arm}` failed: {source}")]
    Arm {
        arm: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Name of the experiment arm that produced this error, if any.
    pub fn arm(&self) -> Option<&str> {
        match self {
            Error::Arm { arm, .. } => Some(arm),
            _ => None,
        }
    }
}
