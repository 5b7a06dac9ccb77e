//! Crate-wide error type.

use crate::tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// Network construction failed (names the offending stage where known).
    #[error("build error: {0}")]
    Build(String),

    /// Checkpoint encode/decode failure with the byte offset that broke.
    #[error("checkpoint error at byte {offset}: {message}")]
    Checkpoint { offset: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    /// Dataset / manifest problems; `line` is 1-based where it applies.
    #[error("data error{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Data { line: Option<usize>, message: String },

    #[error("image error: {0}")]
    Image(String),

    #[error("training error: {0}")]
    Train(String),

    /// Non-finite values showed up where they must not.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn data(message: impl Into<String>) -> Self {
        Error::Data { line: None, message: message.into() }
    }

    pub fn data_at(line: usize, message: impl Into<String>) -> Self {
        Error::Data { line: Some(line), message: message.into() }
    }

    pub fn checkpoint(offset: u64, message: impl Into<String>) -> Self {
        Error::Checkpoint { offset, message: message.into() }
    }
}
