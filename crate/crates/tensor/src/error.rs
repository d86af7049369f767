use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter sets differ: {0}")]
    PathMismatch(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        reason: reason.into(),
    }
}

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, got: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        expected: expected.into(),
        got: got.to_vec(),
    }
}
