//! Logarithmic memory networks: tree memory built by a binary counter
//! (sequential) or a pyramid plus gather (parallel), single-vector
//! attention over it, and the models, training loop and benchmarks built
//! on top.

pub mod attention;
pub mod bench;
pub mod causal;
pub mod checkpoint;
pub mod config;
pub mod counters;
pub mod data;
mod error;
pub mod memory;
pub mod model;
pub mod summarizer;
pub mod train;
pub mod verify;

pub use data::{Dataset, Split, Vocab};
pub use config::{ModelConfig, ScoreOrientation, SummarizerKind, Variant};
pub use error::{LmnError, Result};
pub use memory::{Layout, MemoryTensor, SlotState};
pub use model::{param_count, Generation, Mode, Model, Sampling};
pub use summarizer::Summarizer;
pub use train::{evaluate, evaluate_in, train, AdamW, Artifacts, EvalPoint, TrainConfig, TrainReport};
