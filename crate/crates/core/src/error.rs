use thiserror::Error;

/// Errors produced by model construction, optimizer steps, and estimators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("batch index {index} out of range for {len} samples")]
    BatchIndexOutOfRange { index: usize, len: usize },

    #[error("non-finite {what}{}", .sample.map(|i| format!(" at sample {i}")).unwrap_or_default())]
    NonFinite {
        what: &'static str,
        sample: Option<usize>,
    },

    #[error("matrix is not symmetric (max asymmetry {max_dev:.3e})")]
    AsymmetricMatrix { max_dev: f64 },

    #[error("need at least {needed} replications, got {got}")]
    InsufficientReplications { needed: usize, got: usize },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("malformed trajectory data: {0}")]
    MalformedData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
