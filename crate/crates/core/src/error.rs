use thiserror::Error;

/// Errors produced by the eSSM building blocks.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EssmError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid step size: {0}")]
    InvalidStep(String),
    #[error("invalid length: {0}")]
    InvalidLength(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid head count: {0}")]
    InvalidHeadCount(String),
    #[error("invalid width: {0}")]
    InvalidWidth(String),
    #[error("singular matrix: {0}")]
    SingularMatrix(String),
    #[error("matrix is not diagonalizable: {0}")]
    NonDiagonalizable(String),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error("training diverged at step {step}: loss {loss}")]
    TrainingDiverged { step: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, EssmError>;

pub(crate) fn shape_err(what: &str, expected: (usize, usize), got: (usize, usize)) -> EssmError {
    EssmError::InvalidShape(format!(
        "{what}: expected {}x{}, got {}x{}",
        expected.0, expected.1, got.0, got.1
    ))
}
