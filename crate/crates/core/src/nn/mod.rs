//! Differentiable compute substrate: tensors with reverse-mode gradients, the
//! layer set used by the models (stride-2 conv/deconv, batch norm, dense,
//! leaky-ReLU, sigmoid, softmax), Glorot initialization, Adam, and the
//! checkpoint container.

pub mod adam;
pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use batchnorm::batchnorm;
pub use conv::{conv2d, deconv2d};
pub use init::ParamSet;
pub use tensor::{dense, no_grad, Tensor};

use thiserror::Error;

/// Forward/backward mode: batch norm normalizes by batch statistics and
/// updates running stats in `Train`, and by running stats in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: String, detail: String },
    #[error("backward() requires a scalar loss, got {len} elements")]
    NonScalarLoss { len: usize },
    #[error("batch norm in train mode needs a batch of at least 2, got {batch}")]
    DegenerateBatch { batch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
