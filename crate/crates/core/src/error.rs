use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// The label sequence cannot be aligned to the available frames.
    #[error("infeasible alignment: {labels} labels need at least {required} frames, got {frames}")]
    InfeasibleAlignment {
        frames: usize,
        labels: usize,
        required: usize,
    },

    #[error("exhaustive decoding needs {paths} paths, budget is {budget}")]
    BudgetExceeded { paths: f64, budget: u64 },

    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sequence {index}: {source}")]
    AtSequence {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("epoch {epoch}, batch {batch}: {source}")]
    AtBatch {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },
}

/// Failures while reading a saved model directory.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: missing file")]
    MissingFile { path: PathBuf },

    #[error("{path}: bad magic bytes {found:?}, expected \"CTCW\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported weights format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{path}: truncated file")]
    Truncated { path: PathBuf },

    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },

    #[error("{path}: shape audit failed: {message}")]
    ShapeAudit { path: PathBuf, message: String },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn domain(message: impl Into<String>) -> Self {
        Error::Domain(message.into())
    }

    pub fn at_sequence(self, index: usize) -> Self {
        Error::AtSequence {
            index,
            source: Box::new(self),
        }
    }

    /// Innermost error with sequence/batch context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtSequence { source, .. } | Error::AtBatch { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self.root() {
            Error::Domain(_) => ErrorCategory::Usage,
            Error::NonFiniteGradient { .. } | Error::BudgetExceeded { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }

    /// Short machine-readable tag for the innermost error.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::Domain(_) => "domain",
            Error::InfeasibleAlignment { .. } => "infeasible_alignment",
            Error::BudgetExceeded { .. } => "budget_exceeded",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Shape(_) => "shape",
            Error::Parse { .. } => "parse",
            Error::Load(_) => "load",
            Error::Io { .. } => "io",
            Error::AtSequence { .. } | Error::AtBatch { .. } => unreachable!(),
        }
    }

    /// Sequence index attached to the error, if any.
    pub fn sequence_index(&self) -> Option<usize> {
        match self {
            Error::AtSequence { index, .. } => Some(*index),
            Error::AtBatch { source, .. } => source.sequence_index(),
            _ => None,
        }
    }
}
