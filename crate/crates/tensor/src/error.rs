use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    /// Operand shapes are incompatible for the requested op.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A caller-side precondition was violated (non-scalar backward, missing grad, ...).
    #[error("contract error: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Contract(msg.into()))
}
