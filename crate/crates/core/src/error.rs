use thiserror::Error;

/// Errors raised anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum MerlinError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration or hyperparameter value.
    #[error("config error: {0}")]
    Config(String),

    /// Out-of-range index or malformed in-memory data.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed CSV input; `row` is the 1-based line number in the file.
    #[error("load error at row {row}: {msg}")]
    Load { row: usize, msg: String },

    /// API called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MerlinError>;

impl From<csv::Error> for MerlinError {
    fn from(err: csv::Error) -> Self {
        let row = err.position().map(|p| p.line() as usize).unwrap_or(0);
        MerlinError::Load {
            row,
            msg: err.to_string(),
        }
    }
}
