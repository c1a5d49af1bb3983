use thiserror::Error;

/// Errors surfaced by tensor ops, losses, data generation and file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-parseable code, used by the CLI for `error_code=` lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape_mismatch",
            Error::InvalidParam(_) => "invalid_param",
            Error::NonFinite(_) => "non_finite",
            Error::Loss(_) => "loss_error",
            Error::Validation(_) => "validation_error",
            Error::Io(_) => "io_error",
            Error::Format(_) => "malformed_file",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
