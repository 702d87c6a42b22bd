use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: argument outside the numeric domain (found {value})")]
    NumericDomain { op: &'static str, value: f64 },

    #[error("reduction over an empty set of elements")]
    EmptyReduction,

    #[error("backward() requires a scalar, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },

    #[error("backward() called twice on the same tape root")]
    DoubleBackward,
}
