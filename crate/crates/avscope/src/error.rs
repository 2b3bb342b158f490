//! Crate-wide error type. Variants map onto CLI exit codes, see `exit_code`.

use crate::axis::AxisRole;

/// Errors produced by tensor ops, model code and the pipeline harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("axis {role:?} not present in tensor with axes {axes:?}")]
    MissingAxis { role: AxisRole, axes: Vec<AxisRole> },

    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: distinct per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownParameter(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Data(_) => 4,
            Error::Numeric(_) => 5,
            Error::Shape(_) | Error::MissingAxis { .. } => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
