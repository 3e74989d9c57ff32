use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{field} out of range: {value}")]
    Range { field: &'static str, value: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate batch: need at least {needed} samples, got {got}")]
    DegenerateBatch { needed: usize, got: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("unsupported latitude {0}: tile geometry degenerates near the poles")]
    UnsupportedLatitude(f64),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("fetch failed for {id}: {reason}")]
    Fetch { id: String, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Displays the whole chain itself, so `inner` is not exposed as a source.
    #[error("{context}: {inner}")]
    Context { context: String, inner: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn range(field: &'static str, value: impl ToString) -> Self {
        Error::Range { field, value: value.to_string() }
    }

    /// Wraps the error with a location such as `epoch 3 step 12`.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), inner: Box::new(self) }
    }
}
