use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated an operation's precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Backend or source I/O failed. `attempts` is the number of calls made.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("unknown paper id `{0}`")]
    UnknownPaper(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("missing template placeholder `{0}`")]
    MissingPlaceholder(String),

    #[error("missing prerequisite file {}", .0.display())]
    MissingInput(PathBuf),

    #[error("nothing to evaluate")]
    NothingToEvaluate,

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn transport(message: impl Into<String>) -> Self {
        Error::Transport {
            message: message.into(),
            attempts: 1,
        }
    }
}
