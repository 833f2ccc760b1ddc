use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Every variant maps onto one of the stable process exit codes through
/// [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file or record could not be parsed.
    #[error("{record}: {message}")]
    Format { record: String, message: String },

    /// Mismatched shapes, joint counts or dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A domain invariant does not hold.
    #[error("{0}")]
    Invariant(String),

    /// A numeric failure (NaN, degenerate norm, indefinite covariance).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A caller-supplied parameter is out of range.
    #[error("invalid argument: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(record: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            record: record.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 usage, 3 data/format, 4 invariant, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Shape(_) => 3,
            Error::Invariant(_) => 4,
            Error::Numeric(_) => 5,
        }
    }
}
