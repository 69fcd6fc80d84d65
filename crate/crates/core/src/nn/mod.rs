//! Minimal deterministic function approximation: ReLU MLPs, losses, Adam,
//! gradient clipping and Polyak-averaged target parameters. All arithmetic
//! is `f64`.

pub mod checkpoint;
mod loss;
mod matrix;
mod mlp;
mod optim;

pub use loss::{expectile_loss, huber, huber_grad, log_softmax, logsumexp, softmax, Loss, TdBatch};
pub use matrix::Matrix;
pub use mlp::{ForwardCache, Layer, NetParams, DEFAULT_HIDDEN_WIDTH};
pub use optim::{adam_step, clip_global_norm, global_norm, polyak, AdamState};

/// Gradients share the parameter layout.
pub type GradBundle = NetParams;
