use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("malformed payload: {0}")]
    Parse(String),

    #[error("plan has {k} sub-prompts, expected between 1 and {max}")]
    PlanBounds { k: usize, max: usize },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("backend failure after {attempts} attempt(s): {message}")]
    Backend { attempts: u32, message: String },

    #[error("unknown keyword `{0}`")]
    Vocabulary(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Stable process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend { .. } => 2,
            Error::Training(_) | Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}
