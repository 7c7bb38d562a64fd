use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape {shape:?} does not fit {len} values")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },

    #[error("{op}: operand shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite values in result (strict mode)")]
    NonFinite { op: &'static str },

    #[error("gradient output must be scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("{op} is evaluation-only and cannot participate in differentiation")]
    NonDifferentiable { op: &'static str },
}
