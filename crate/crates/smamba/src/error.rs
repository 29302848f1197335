use thiserror::Error;

/// Crate-wide error type. Variants are grouped by subsystem; the CLI maps
/// them onto its exit-code contract (2 usage/config, 3 numeric, 4 verification).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    /// A forward op produced NaN/Inf from finite inputs, or a loss went
    /// non-finite during training.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("NaN gradient for parameter `{0}`")]
    NanGrad(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: malformed PNM header")]
    PnmHeader { path: String },

    #[error("{path}: unsupported PNM format `{found}` (only binary P5/P6 are read)")]
    PnmUnsupported { path: String, found: String },

    #[error("{path}: maxval {found} unsupported (must be 255)")]
    PnmMaxval { path: String, found: u32 },

    #[error("{path}: truncated payload (want {want} bytes, got {got})")]
    PnmTruncated { path: String, want: usize, got: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint: bad magic (not an SMCK file)")]
    CkptMagic,

    #[error("checkpoint: unsupported version {0}")]
    CkptVersion(u32),

    #[error("checkpoint: truncated")]
    CkptTruncated,

    #[error("checkpoint: shape mismatch for tensor `{name}`: stored {stored:?}, expected {expected:?}")]
    CkptShape {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint: {0}")]
    Ckpt(String),

    /// A verification command (gradcheck, scan-bench) breached its threshold.
    #[error("verification failed for {module}: {detail}")]
    Verification { module: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArg {
            op,
            detail: detail.into(),
        }
    }
}
