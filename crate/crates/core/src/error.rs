use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible or degenerate tensor shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Batch statistics requested over fewer than two elements.
    #[error("degenerate batch statistics: {0}")]
    DegenerateStatistics(String),

    /// A caller broke an API contract (wrong tape, non-scalar loss, missing grad, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset layout problems: orphaned images or masks, missing directories.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("unsupported format for {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("io error for {path}: {source}")]
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

    /// True for failures caused by bad input files or the filesystem, as opposed
    /// to numeric or training failures.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Checkpoint(_)
                | Error::Ingestion(_)
                | Error::Format { .. }
                | Error::Image { .. }
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Config(_)
        )
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}

macro_rules! contract_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}

pub(crate) use contract_err;
pub(crate) use dim_err;
