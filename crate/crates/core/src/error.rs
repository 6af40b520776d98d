use niff_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A class has too few samples for a corrected variance.
    #[error("insufficient data at site {site}: class {class} has {count} sample(s), need at least 2")]
    InsufficientData { site: String, class: usize, count: u64 },
    #[error("insufficient batch: {0} feature(s) per class, need at least 2 for a batch variance")]
    InsufficientBatch(usize),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("training failed: {0}")]
    Training(String),
    #[error("training diverged at iteration {iteration} (last finite iteration: {last_good:?})")]
    Diverged { iteration: usize, last_good: Option<usize> },
    #[error("malformed {kind} data: {reason}")]
    Format { kind: &'static str, reason: String },
    #[error("{kind} format version {found} is not supported (expected {expected})")]
    Version { kind: &'static str, expected: u32, found: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, NiffError>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(NiffError::Contract(msg.into()))
}

pub(crate) fn config_err<T>(field: &str, reason: impl Into<String>) -> Result<T> {
    Err(NiffError::Config {
        field: field.to_string(),
        reason: reason.into(),
    })
}
