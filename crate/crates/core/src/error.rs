use std::path::PathBuf;

/// Errors surfaced by the library.
///
/// Shape mismatches between tensors are treated as programmer error and
/// panic via `assert!`; this enum covers runtime failures: bad input files,
/// bad configuration, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A dataset or checkpoint file is malformed.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A referenced file is missing.
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

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
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
