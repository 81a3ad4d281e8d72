use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// The standardization sphere does not exist for this input (zero spread at eps = 0).
    #[error("degenerate input: {context}")]
    Degenerate { context: String },

    #[error("batch too small: train-mode batch normalization needs B >= 2, got {0}")]
    BatchTooSmall(usize),

    #[error("configuration error: {0}")]
    Config(String),

    /// The weight row lies in the kernel of the batch covariance; the normalized
    /// output collapses to `beta * e_B`.
    #[error("kernel collapse: weight row annihilated by batch covariance (output = {beta} * e_B)")]
    KernelCollapse { beta: f64 },

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("io error: {0}")]
    Io(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse { location: format!("line {} column {}", e.line(), e.column()), message: e.to_string() }
    }
}
