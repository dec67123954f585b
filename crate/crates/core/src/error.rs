//! Error type shared by every module of the crate.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Dimensions of vectors, matrices or batches disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A computation produced or received a non-finite or singular value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An operation was called in the wrong state (e.g. backward without forward).
    #[error("invalid state: {0}")]
    State(String),

    /// Dataset content is unusable (empty classes, missing populations).
    #[error("data error: {0}")]
    Data(String),

    /// A file did not follow its expected layout.
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// An experiment configuration or plan is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// One run of an experiment failed; `run` names it.
    #[error("run {run} failed: {source}")]
    Run {
        run: String,
        #[source]
        source: Box<Error>,
    },

    /// Run artifacts are missing or unreadable.
    #[error("report error: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Parses TOML, reporting failures with the line they start on.
pub(crate) fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
        message: e.message().trim_end().to_string(),
    })
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
