//! Crate-wide error type.

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes; reports both sides.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Axis out of range for the given rank.
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    /// Numerical failure (non-finite values, invalid labels, degenerate input).
    Numeric(String),
    /// Bad configuration value or file.
    Config(String),
    /// Dataset content problems (missing clips, manifest mismatch).
    Data(String),
    /// Unrecognized or wrong-version file format.
    Format(String),
    Io {
        path: PathBuf,
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch, lhs={lhs:?} rhs={rhs:?}")
            }
            Error::Axis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
