use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("log of non-positive value {value}")]
    LogNonPositive { value: f64 },
    #[error("row {row} has near-zero L2 norm ({norm:e})")]
    NearZeroNorm { row: usize, norm: f64 },
    #[error("reduction over an empty tensor")]
    EmptyReduction,
    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("invalid {field}: {message}")]
    Config { field: String, message: String },
    #[error("parameter layout mismatch: expected {expected} values, got {actual}")]
    LayoutMismatch { expected: usize, actual: usize },
    #[error("step {step} out of schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("degenerate dataset: {0}")]
    DegenerateData(String),
    #[error("{path}: row {row}: {message}")]
    CsvRow {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
