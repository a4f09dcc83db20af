use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] skinseg_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    /// Missing or malformed input files.
    #[error("input error: {0}")]
    Input(String),
    #[error("{path}: invalid config: {message}")]
    Config { path: String, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 1 for bad input or configuration, 2 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Core(skinseg_core::Error::Numerical(_)) | Error::Io { .. } | Error::Json(_) => 2,
            _ => 1,
        }
    }
}
