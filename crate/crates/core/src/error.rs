use std::path::PathBuf;

use crate::calibrator::CalibrationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unsupported dimension {0}: must be a power of two")]
    UnsupportedDimension(usize),

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },

    #[error("optimizer state became non-finite at step {step}")]
    NonFiniteState { step: u64 },

    #[error("calibration diverged at step {step}: loss {loss}")]
    Divergence {
        step: usize,
        loss: f64,
        partial: Box<CalibrationReport>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
