use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible extents, bad axis, or an empty dimension where one is required.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Every offending configuration key, one message per key.
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {context}: {message}")]
    Parse { context: String, message: String },

    /// A non-finite loss aborted training.
    #[error("numerical abort at epoch {epoch}, step {step}: {message}")]
    Numerical {
        epoch: usize,
        step: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Contract(_) | Error::Config(_) | Error::Parse { .. } => 1,
            Error::Io { .. } => 2,
            Error::Numerical { .. } => 3,
        }
    }
}
