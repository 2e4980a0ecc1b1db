//! Reverse-mode AD over flat tensors, the residual MLPs, the AdamW
//! optimizer, and parameter checkpointing.

pub mod adamw;
pub mod checkpoint;
pub mod mlp;
pub mod tape;

pub use adamw::{AdamWConfig, AdamWState};
pub use mlp::{MlpParams, INPUT_NORM_EPS};
pub use tape::{Gradients, NodeId, Tape};
