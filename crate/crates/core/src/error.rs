use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A line-oriented input failed to parse. `line` is 1-based.
    #[error("{origin}:{line}: {message}")]
    Parse {
        origin: String,
        line: usize,
        message: String,
    },

    #[error("invalid document {origin}: {message}")]
    Document { origin: String, message: String },

    #[error("unknown image ids: {}", .0.join(", "))]
    UnknownImages(Vec<String>),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("detector '{detector}' has no entry for image '{image_id}'")]
    Lookup { detector: String, image_id: String },

    #[error("detector '{detector}' cannot serve view '{view_id}'")]
    Capability { detector: String, view_id: String },

    #[error("image '{image_id}': {source}")]
    Image {
        image_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("ensemble member '{member}': {source}")]
    Member {
        member: String,
        #[source]
        source: Box<Error>,
    },

    #[error("benchmark aborted after {completed} timed calls (partial mean {partial_mean_ms:?} ms): {source}")]
    BenchAborted {
        completed: usize,
        partial_mean_ms: Option<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("external detector '{detector}': {message}")]
    Plugin { detector: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True when the root cause is a filesystem or stream failure.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Image { source, .. }
            | Error::Member { source, .. }
            | Error::BenchAborted { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
