//! Spatiotemporal predictive learning: a non-recurrent video predictor built
//! from a convolutional encoder/decoder around stacked temporal attention
//! blocks, trained with a reconstruction loss plus a differential divergence
//! regularizer on frame-to-frame changes.
//!
//! Everything runs on the CPU through a small dense-tensor library with a
//! tape-based reverse-mode autodiff.

pub mod autograd;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
pub use tensor::{ConvSpec, FoldMode, Scalar, Tensor};
