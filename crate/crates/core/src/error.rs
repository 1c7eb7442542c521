use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value in {layer}")]
    Numeric { layer: String },

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Problems decoding an adapter file.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}, expected \"SADP\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated file: {0}")]
    Truncated(&'static str),

    #[error("corrupt file: {0}")]
    Corrupt(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable numeric code per error kind, shared with the C interface.
    pub fn code(&self) -> i32 {
        match self {
            Error::Input(_) => 1,
            Error::Dimension(_) => 2,
            Error::Numeric { .. } => 3,
            Error::Training { .. } => 4,
            Error::Config(_) => 5,
            Error::Io { .. } => 6,
            Error::Format(f) => f.code(),
        }
    }

    /// True for failures caused by arithmetic blowing up rather than by
    /// malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. } | Error::Training { .. })
    }
}

impl FormatError {
    pub fn code(&self) -> i32 {
        match self {
            FormatError::BadMagic(_) => 7,
            FormatError::UnsupportedVersion(_) => 8,
            FormatError::Truncated(_) => 9,
            FormatError::Corrupt(_) => 10,
        }
    }
}
