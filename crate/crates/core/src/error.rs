use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("region {rect} does not fit inside a {height}x{width} image")]
    OutOfBounds {
        rect: String,
        height: usize,
        width: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("schema error in weight archive: {name}: {reason}")]
    Schema { name: String, reason: String },

    #[error("degenerate mask: no foreground pixel survives resizing")]
    DegenerateMask,

    #[error("version mismatch: {0}")]
    Version(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("regions {first} and {second} overlap")]
    Conflict { first: usize, second: usize },

    #[error("loss term `{term}` is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Version,
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Decode { .. }
            | Error::Dimension(_)
            | Error::OutOfBounds { .. }
            | Error::Parameter(_)
            | Error::Schema { .. }
            | Error::DegenerateMask
            | Error::Conflict { .. }
            | Error::Dataset(_)
            | Error::Config(_) => ErrorKind::Input,
            Error::Version(_) | Error::Integrity(_) => ErrorKind::Version,
            Error::NonFinite { .. } | Error::Io(_) | Error::Tensor(_) | Error::Json(_) => {
                ErrorKind::Runtime
            }
        }
    }
}
