use std::path::PathBuf;

use sqlc_tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while parsing or validating a compressed container.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown codec id {0}")]
    BadCodec(u8),
    #[error("quality index {0} outside 1..=8")]
    BadQuality(u8),
    #[error("unknown flag bits {0:#04x}")]
    BadFlags(u8),
    #[error("inconsistent header: {0}")]
    Inconsistent(String),
    #[error("invalid embedded stain matrix: {0}")]
    BadStainMatrix(String),
    #[error("payload length {declared} does not match {actual} remaining bytes")]
    LengthMismatch { declared: u32, actual: usize },
    #[error("container truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("model hash {found:016x} does not match loaded model {expected:016x}")]
    HashMismatch { expected: u64, found: u64 },
    #[error("container codec {found} does not match model codec {expected}")]
    CodecMismatch { expected: u8, found: u8 },
    #[error("container quality {found} does not match model quality {expected}")]
    QualityMismatch { expected: u8, found: u8 },
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
}

/// Failures while loading or validating a model bundle.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BundleError {
    #[error("bad bundle magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported bundle version {0}")]
    BadVersion(u8),
    #[error("bundle hash mismatch: stored {stored:016x}, computed {computed:016x}")]
    HashMismatch { stored: u64, computed: u64 },
    #[error("bundle truncated")]
    Truncated,
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("duplicate tensor {0}")]
    DuplicateTensor(String),
    #[error("wrong codec id: expected {expected}, found {found}")]
    WrongCodec { expected: u8, found: u8 },
    #[error("malformed bundle: {0}")]
    Malformed(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("entropy model support exceeds 16-bit range on channel {channel}")]
    SupportOverflow { channel: usize },
    #[error("symbol {value} is not representable in 16 bits")]
    SymbolRange { value: i32 },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("JPEG adapter unavailable: {0}")]
    JpegUnavailable(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
