use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: length {len} bytes is not a multiple of 16", path.display())]
    MalformedScan { path: PathBuf, len: u64 },

    #[error("{}: point {index} has a non-finite coordinate", path.display())]
    NonFiniteScanPoint { path: PathBuf, index: usize },

    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("rotation deviates from orthonormal by {deviation:e}")]
    NonOrthonormal { deviation: f64 },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter `{name}`: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },

    #[error("transport plan is not finite for lambda = {lambda:e}")]
    NonFiniteTransport { lambda: f64 },

    #[error("no effective correspondences: every row of the transport plan is below the mass floor")]
    NoEffectiveCorrespondences,

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("insufficient {what}: need {needed}, found {found}")]
    Insufficient {
        what: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("descriptor spec mismatch: {0:#018x} vs {1:#018x}")]
    SpecMismatch(u64, u64),

    #[error("scan index {index} is not greater than the last stored index {last}")]
    NonIncreasingIndex { index: usize, last: usize },

    #[error("bad file format: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }
}
