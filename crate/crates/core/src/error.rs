use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("corrupted file {}: stored CRC {stored:08x}, computed {computed:08x}", path.display())]
    Corrupt {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("truncated file {}: expected {expected} bytes, found {found}", path.display())]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{}:{line}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing parameter '{0}'")]
    MissingParam(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code used by the command line tool.
    ///
    /// 2 = usage or configuration, 3 = I/O and file formats, 4 = numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::Validation(_)
            | Error::Config(_)
            | Error::MissingParam(_)
            | Error::Parse { .. } => 2,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Corrupt { .. }
            | Error::Truncated { .. } => 3,
            Error::Shape { .. } | Error::NonFinite(_) | Error::Numerical(_) => 4,
        }
    }
}
