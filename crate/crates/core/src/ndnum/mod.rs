//! Dense `f64` tensors with reverse-mode differentiation and Adam.

mod adam;
mod gemm;
mod gradcheck;
mod ops;
mod tensor;

pub use adam::{Adam, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};
pub use gradcheck::finite_diff_check;
pub use ops::LAYER_NORM_EPS;
pub use tensor::{no_grad, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("expected a matrix, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("nothing to concatenate")]
    EmptyConcat,
    #[error("row index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("axis {axis} out of range for {ndim}-d tensor")]
    AxisOutOfRange { axis: usize, ndim: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("non-finite gradient in `{param}` at element {index} (optimizer step {step})")]
    NonFiniteGradient { param: String, index: usize, step: u64 },
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("parameter trees differ: {0}")]
    ParamTreeMismatch(String),
}
