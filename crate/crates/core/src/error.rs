use std::path::PathBuf;

use kws_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("wav format: {0}")]
    WavFormat(String),
    #[error("audio too short: {0}")]
    TooShort(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("numeric abort at step {step}: {msg}")]
    NumericAbort {
        step: u64,
        msg: String,
        last_good: Option<PathBuf>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 3 for numeric aborts, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericAbort { .. } | Error::Tensor(TensorError::NonFiniteGradient(_)) => 3,
            _ => 2,
        }
    }
}
