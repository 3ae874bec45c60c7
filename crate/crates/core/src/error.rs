use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("cannot partition {height}x{width} into blocks of {block}")]
    Partition {
        height: usize,
        width: usize,
        block: usize,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("model configuration digest mismatch")]
    DigestMismatch,

    #[error("truncated file: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const PARSE: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const IO: i32 = 5;
    pub const INPUT: i32 = 6;
}

impl Error {
    /// Usage and configuration mistakes, including missing files, map to
    /// [`exit::USAGE`]; malformed files to [`exit::PARSE`].
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => exit::USAGE,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => exit::USAGE,
            Error::Io { .. } => exit::IO,
            Error::Parse { .. }
            | Error::BadMagic { .. }
            | Error::Version { .. }
            | Error::DigestMismatch
            | Error::Truncated { .. } => exit::PARSE,
            Error::Numeric(_) => exit::NUMERIC,
            Error::Shape { .. } | Error::Partition { .. } | Error::Input(_) => exit::INPUT,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
