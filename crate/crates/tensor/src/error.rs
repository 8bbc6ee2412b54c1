use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {reason} (shape {shape:?})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward was already run on this loss; build a new graph")]
    AlreadyBackpropagated,

    #[error("tensor data is shared with a live graph and cannot be mutated")]
    SharedTensor,

    #[error("non-finite value in `{name}` at coordinate {index}")]
    NonFinite { name: String, index: usize },

    #[error("failed to allocate {bytes} bytes")]
    OutOfMemory { bytes: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;
