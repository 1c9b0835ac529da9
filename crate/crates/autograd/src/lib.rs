//! Reverse-mode automatic differentiation for single-image convolutional
//! networks.
//!
//! Values are channel-first [`Tensor`]s without a batch axis. A [`Tape`]
//! records one forward pass; [`Tape::backward`] returns gradients for every
//! node marked as differentiable. Everything is single-threaded and
//! deterministic.

mod error;
mod float;
pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use error::{EngineError, Result};
pub use float::{gemm, Float};
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
