use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was used outside its documented contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data is malformed (bad class ids, corrupt files, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A loss or gradient became NaN or infinite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension { op, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 1,
            Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
