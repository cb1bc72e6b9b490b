use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A corpus, vocabulary, dataset or checkpoint record could not be parsed.
    #[error("parse error at line {line}: {field}: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    /// Input was well-formed but violated a data invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// The requested operation is not available for this input or setup.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value was produced during numeric work.
    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Validation(_) | Error::Config(_)
        )
    }
}
