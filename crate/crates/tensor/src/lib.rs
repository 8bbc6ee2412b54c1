//! Dense CPU tensors with reverse-mode automatic differentiation.
//!
//! Broadcasting is deliberately minimal: elementwise ops accept a right
//! operand whose shape is a suffix of the left operand's shape. Anything
//! else is a [`TensorError::ShapeMismatch`].

pub mod alloc;
mod error;
mod float;
pub mod gradcheck;
pub mod kernels;
mod ops;
pub mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use float::Float;
pub use gradcheck::{grad_check, GradCheckReport, GradEntry, Stencil};
pub use rng::Rng;
pub use tensor::{alloc_zeroed, is_grad_enabled, no_grad, BackwardFn, Tensor};
