use std::path::PathBuf;

/// Errors raised by the alignment library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, channel counts or parameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A serialized artifact that does not decode.
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite values or a diverging optimizer.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
