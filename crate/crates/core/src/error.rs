use std::path::PathBuf;

use mpnas_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NasError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}: no records")]
    NoRecords(PathBuf),
    #[error("invalid graph record: {0}")]
    InvalidRecord(String),
    #[error("inconsistent widths: {0}")]
    InconsistentWidths(String),
    #[error("record {index} does not fit the batch layout: {msg}")]
    DoesNotFit { index: usize, msg: String },
    #[error("split needs at least 10 records, got {0}")]
    TooFewRecords(usize),
    #[error("unknown {kind} '{value}'")]
    Unknown { kind: &'static str, value: String },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no successful evaluations")]
    NoSuccessfulRecords,
    #[error("not enough usable records: need {need}, got {got}")]
    NotEnoughRecords { need: usize, got: usize },
    #[error("evaluation cancelled")]
    Cancelled,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NasError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> NasError {
    let path = path.into();
    move |source| NasError::Io { path, source }
}
