use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("header declares a zero dimension ({width}x{height}x{frames})")]
    ZeroDimension {
        width: u32,
        height: u32,
        frames: u32,
    },

    #[error("truncated payload: header promises {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("solver diverged at iteration {iteration}: non-finite iterate")]
    Diverged { iteration: usize },

    #[error("tuning grid is not calibrated")]
    Uncalibrated,

    #[error("no usable in-control data: {0}")]
    NoData(String),

    #[error("localization requested without an alarm")]
    NoAlarm,

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
