//! Small reverse-mode differentiation engine: a dense [`Tensor`], a [`Tape`]
//! that records the ops the spiking model needs, parameter storage with a
//! checkpoint container, and a finite-difference checker.

mod check;
mod kernels;
mod nn;
mod store;
mod tape;
mod tensor;

pub use check::{central_difference, relative_error};
pub use nn::{BatchNorm, Conv2d, Linear, BN_EPS, BN_MOMENTUM};
pub use store::{BufferId, ParamId, ParamStore, TensorContainer};
pub use tape::{surrogate_grad, surrogate_primitive, BatchStats, NormStats, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: operands must be binary")]
    NonBinary(&'static str),
    #[error("tensor container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GradError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        GradError::Shape { op, detail }
    }
}
