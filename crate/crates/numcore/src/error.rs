use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("gradient norm is not finite")]
    NonFiniteNorm,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("optimizer state is not initialized for {0} parameters")]
    UninitializedState(usize),
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;
