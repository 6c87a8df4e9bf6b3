//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Values are `f64` throughout. A [`Tape`] records one forward pass; model
//! parameters live in a [`ParamStore`] and are bound to a fresh tape for each
//! sample, so independent samples never share mutable state.

pub mod check;
mod checkpoint;
mod error;
mod optim;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use optim::AdamW;
pub use params::{ParamId, ParamStore};
pub use schedule::{cosine_restart_lr, RestartMode};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
