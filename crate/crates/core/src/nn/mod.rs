//! Minimal dense-tensor CNN engine.
//!
//! Every operation comes as an explicit forward/backward pair; there is no
//! autograd graph. Architectures in [`crate::models`] wire these calls
//! together by hand. Tensors are NCHW, double precision by default, with an
//! `f32` instantiation available as a speed mode.

mod adam;
mod batchnorm;
mod checkpoint;
mod conv;
pub mod gradcheck;
mod layer;
mod loss;
mod ops;
mod real;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNorm2d, BatchNormCache, BN_EPS, BN_MOMENTUM};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, Record, CHECKPOINT_MAGIC};
pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvCache};
pub use layer::{Activation, Mode, Param};
pub use loss::{cross_entropy_loss, cross_entropy_with_labels, softmax_channels};
pub use ops::{
    activation_backward, activation_forward, concat_channels, maxpool2_backward, maxpool2_forward, split_channels,
    upsample2_backward, upsample2_forward, MaxPoolCache, LEAKY_SLOPE,
};
pub use real::Real;
pub use tensor::{mask_labels, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value after {0}")]
    NonFinite(String),
    #[error("batch norm `{0}` used in eval mode before any training step")]
    Uninitialized(String),
    #[error("backward called without a matching forward in `{0}`")]
    MissingCache(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
