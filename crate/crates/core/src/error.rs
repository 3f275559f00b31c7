use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward root must hold exactly one element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite {what} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, what: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: bad magic", path.display())]
    BadMagic { path: PathBuf },

    #[error("{}: truncated payload", path.display())]
    Truncated { path: PathBuf },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("label {label} of sample {sample} is out of range for {classes} classes")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        classes: usize,
    },

    #[error("split references unknown {what} {index}")]
    UnknownSplitReference { what: &'static str, index: usize },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => ErrorKind::Numerical,
            Error::InvalidArgument(_) | Error::Config(_) => ErrorKind::Usage,
            Error::Shape { .. } | Error::NonScalarRoot(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
