use thiserror::Error;

/// Errors raised by the attribution engine.
#[derive(Debug, Error)]
pub enum TdaError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("non-finite update at unlearning step {step}")]
    Numeric { step: usize },

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("missing prerequisite {artifact} (produce it with `{producer}`)")]
    MissingPrerequisite { artifact: String, producer: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TdaError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TdaError::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TdaError::Argument(msg.into()))
}
