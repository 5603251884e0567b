use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GapError>;

#[derive(Debug, Error)]
pub enum GapError {
    #[error(transparent)]
    Tensor(#[from] ndiff::NdiffError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what}: expected dimension {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("action component {value} exceeds bound {bound}")]
    ActionOutOfBounds { value: f64, bound: f64 },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("`{op}` is not available for the {variant} variant")]
    UnsupportedVariant { op: &'static str, variant: String },

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl GapError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }
}
