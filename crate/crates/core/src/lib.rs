//! Goal-aware prediction laboratory.
//!
//! Learns goal-conditioned latent dynamics that reconstruct the goal-state
//! residual, plans with cross-entropy-method MPC in latent space, and
//! measures how the distribution of model error over candidate trajectories
//! affects downstream task success.

pub mod analysis;
pub mod data;
pub mod envs;
pub mod error;
pub mod models;
pub mod planner;
pub mod rng;
pub mod theorylab;

pub use error::{GapError, Result};
