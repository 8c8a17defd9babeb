use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: String },

    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint: unsupported version {0}")]
    VersionMismatch(u32),

    #[error("checkpoint: truncated file")]
    Truncated,

    #[error("checkpoint: tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint: tensor {name} has dtype {found}, expected {expected}")]
    DtypeMismatch {
        name: String,
        expected: u8,
        found: u8,
    },

    #[error("checkpoint: expected tensor {expected}, found {found}")]
    NameMismatch { expected: String, found: String },

    #[error("checkpoint: expected {expected} tensors, found {found}")]
    CountMismatch { expected: usize, found: usize },

    #[error("checkpoint: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("data: {0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonScalarRoot(_) => "non_scalar_root",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite { .. } => "non_finite",
            Error::BadMagic(_) => "bad_magic",
            Error::VersionMismatch(_) => "version_mismatch",
            Error::Truncated => "truncated",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::DtypeMismatch { .. } => "dtype_mismatch",
            Error::NameMismatch { .. } => "name_mismatch",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::Checksum { .. } => "checksum",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Verification(_) => "verification",
            Error::Io { .. } => "io",
        }
    }
}
