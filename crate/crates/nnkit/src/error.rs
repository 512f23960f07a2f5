use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite value in {0}")]
    Numerics(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> NnError {
    NnError::Shape {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
