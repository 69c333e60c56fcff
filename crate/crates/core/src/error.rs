use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum QlseError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular Fisher information matrix (condition estimate {condition:e})")]
    SingularFim { condition: f64 },

    #[error("zero reference norm")]
    ZeroNorm,
}

pub type Result<T> = std::result::Result<T, QlseError>;
