//! Offline reinforcement learning for factorisable discrete action spaces.
//!
//! Per-dimension utility networks are combined by value decomposition
//! (mean, sum or independent learners) and trained offline under one of
//! several regularisation schemes: a batch-constrained target, a conservative
//! penalty, expectile-based implicit Q-learning, or one-step policy
//! evaluation. The crate also ships the multi-actuator maze benchmark, its
//! dataset-generation pipeline, an evaluation harness and a Monte-Carlo
//! laboratory for target overestimation under uniform noise.

pub mod agents;
pub mod bias_sim;
pub mod config;
pub mod data;
pub mod decomp;
pub mod env;
mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
