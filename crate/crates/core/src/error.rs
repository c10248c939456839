use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below 1e-12; degenerate embedding")]
    ZeroNorm,

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("text produced no tokens")]
    EmptyText,

    #[error("anchor {anchor} has no positive pair")]
    NoPositive { anchor: usize },

    #[error("no evidence candidates supplied")]
    EmptyEvidence,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("label fraction {fraction} yields {labeled} labeled samples (minimum {minimum})")]
    InsufficientLabels {
        fraction: f64,
        labeled: usize,
        minimum: usize,
    },

    #[error("teacher grounder has not been trained")]
    UntrainedTeacher,

    #[error("gold set is empty")]
    EmptyGold,

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn dims(expected: &[usize], actual: &[usize]) -> Self {
        Error::DimMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// True for failures that originate in the filesystem rather than in
    /// user-supplied values.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::MissingCheckpoint(_) | Error::Format { .. }
        ) || matches!(self, Error::Csv(e) if e.is_io_error())
    }
}
