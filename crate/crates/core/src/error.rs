use std::path::PathBuf;

use lmn_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("capacity exceeded: position {position} needs more than {levels} memory levels (max_seq_len {max_seq_len})")]
    Capacity {
        position: usize,
        levels: usize,
        max_seq_len: usize,
    },

    #[error("sequence length {len} exceeds max_seq_len {max_seq_len}")]
    TooLong { len: usize, max_seq_len: usize },

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    InvalidToken { token: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (lr {lr:e}, grad norm {grad_norm:e})")]
    NonFiniteLoss { step: usize, lr: f64, grad_norm: f64 },
}

impl LmnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LmnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_out_of_memory(&self) -> bool {
        matches!(self, LmnError::Tensor(TensorError::OutOfMemory { .. }))
    }
}

pub type Result<T> = std::result::Result<T, LmnError>;
