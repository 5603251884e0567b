//! Dense `f64` tensors with a tape-based reverse-mode differentiator.
//!
//! The crate is deliberately small: enough operations to build multilayer
//! perceptrons, variational encoders and multi-step latent rollouts, plus an
//! Adam optimiser and a binary checkpoint format.
//!
//! Two evaluation routes exist for every model built on top of this crate:
//! the [`Graph`] route records a tape and supports [`Graph::backward`], while
//! the plain [`Tensor`] methods evaluate values only and are safe to share
//! across threads.

mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{read_params, write_params, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{NdiffError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor;
