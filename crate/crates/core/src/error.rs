use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range: {what} = {index} (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("unknown layer {0}")]
    UnknownLayer(String),

    #[error("the first convolutional layer has no effective hypersurface (requested {0})")]
    FirstConvExcluded(String),

    #[error("activation trace does not belong to this network: {0}")]
    TraceMismatch(String),

    #[error("network graph is invalid: {0}")]
    InvalidGraph(String),

    // Model / archive containers.
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("file truncated: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("malformed file: {0}")]
    Malformed(String),

    // Dataset.
    #[error("missing dataset file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed record in {}: {reason}", path.display())]
    MalformedRecord { path: PathBuf, reason: String },

    #[error("malformed label {label} at record {record} of {}", path.display())]
    MalformedLabel {
        path: PathBuf,
        record: usize,
        label: u8,
    },

    // Numerics.
    #[error("non-finite loss at epoch {epoch}, step {step}: {value}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },

    #[error("non-finite gradient during {0}")]
    NonFiniteGradient(&'static str),

    #[error("surface #{ordinal} ({index}): {source}")]
    Surface {
        ordinal: u64,
        index: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image encoding failed: {0}")]
    Encoding(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
