use thiserror::Error;

/// Dimension and layout failures shared by the tensor, network and gradient code.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("value count {actual} does not match dimensions (expected {expected})")]
    Length { expected: usize, actual: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dims { expected: String, actual: String },
    #[error("loss/softmax mismatch: {0}")]
    LossMismatch(String),
    #[error("index {index} out of range 1..={max}")]
    Index { index: usize, max: usize },
    #[error("invalid rate {0}; must lie in [0, 1]")]
    Rate(f64),
}
