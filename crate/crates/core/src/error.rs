use std::path::PathBuf;

/// Errors raised across the detector pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value in `{term}`{}", .context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    Numeric { term: String, context: Option<String> },

    #[error("data error: {0}")]
    Data(String),

    #[error("dataset layout error under {root}: missing {missing}; expected train/normal, test/normal and test/abnormal")]
    Layout { root: PathBuf, missing: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("incompatible checkpoint {path}: {reason}")]
    Incompatible { path: PathBuf, reason: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(term: impl Into<String>) -> Self {
        Error::Numeric {
            term: term.into(),
            context: None,
        }
    }
}

/// Extension for attaching a path to `std::io` results.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
