use thiserror::Error;

/// Shape and configuration failures raised by tensor kernels.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: axis `{axis}` has extent {actual}, expected {expected}")]
    Shape {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Config { op: &'static str, reason: String },
    #[error("data length {len} does not match shape {shape:?}")]
    ElementCount { shape: Vec<usize>, len: usize },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        TensorError::Shape {
            op,
            axis: axis.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn config(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::Config {
            op,
            reason: reason.into(),
        }
    }
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("frame-difference regularizer needs at least 2 frames, got {frames}")]
    DdrInapplicable { frames: usize },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Autograd(#[from] crate::autograd::AutogradError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch} (sequences {sequences:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        sequences: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
