use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape contract violated: {0}")]
    Shape(String),

    #[error("config parse error at line {line}, column {column}: {msg}")]
    ConfigParse {
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("invalid config field `{field}`: {msg}")]
    Validation { field: &'static str, msg: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite value in `{term}`")]
    NonFinite { term: String },

    #[error("training aborted at step {step}: non-finite loss term `{term}`")]
    Diverged { step: u64, term: String },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than internal faults.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::ConfigParse { .. }
                | Error::Validation { .. }
                | Error::Precondition(_)
                | Error::Data(_)
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::Checkpoint(_)
                | Error::State(_)
        )
    }
}
