use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for an operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value violates a model, data or training invariant.
    #[error("config error: {0}")]
    Config(String),

    /// A non-finite value appeared in the output of `op`.
    #[error("numeric error in {op}: non-finite value at index {index}")]
    Numeric { op: &'static str, index: usize },

    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}, column '{column}': cannot parse '{value}' as a number")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("variate '{0}' has zero variance on the training segment")]
    ConstantVariate(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint tensor '{name}': {reason}")]
    CorruptTensor { name: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by invalid input or configuration rather
    /// than something going wrong at runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Dimension(_)
                | Error::Usage(_)
                | Error::Parse { .. }
                | Error::Data(_)
                | Error::ConstantVariate(_)
                | Error::VersionMismatch { .. }
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
