//! Reverse-mode automatic differentiation over dense `f64` arrays, plus Adam.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState, Moments};
pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport};
pub use graph::{
    band_frequency, composite_ray, rodrigues_matrix, sigmoid, softplus, Activation, BinaryOp, Graph,
    GridSpec, Reduction, Var,
};
pub use tensor::{broadcast_shape, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for {ndim} dimensions")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        ndim: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("division by zero")]
    ZeroDivisor,
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0}")]
    Invalid(String),
}
