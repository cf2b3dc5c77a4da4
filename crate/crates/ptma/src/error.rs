//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PtmaError {
    /// Malformed invocation: unknown flag, missing argument, bad value.
    #[error("usage: {0}")]
    Usage(String),

    /// Shape mismatch in a tensor operation, naming the op and shapes.
    #[error("{op}: incompatible shapes {shapes}")]
    Shape { op: &'static str, shapes: String },

    /// Bad input data: missing file, bad magic, truncation, inconsistent
    /// catalog.
    #[error("data error: {0}")]
    Data(String),

    /// NaN/divergence during training or a failed gradient check.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Invalid configuration (dimension/mode mismatch, bad weights).
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl PtmaError {
    pub fn data(msg: impl Into<String>) -> Self {
        PtmaError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        PtmaError::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        PtmaError::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PtmaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PtmaError::Usage(_) => 1,
            PtmaError::Data(_) | PtmaError::Io { .. } => 2,
            PtmaError::Numeric(_) => 3,
            PtmaError::Shape { .. } | PtmaError::Config(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PtmaError>;
