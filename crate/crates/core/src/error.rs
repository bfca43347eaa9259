use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(usize),

    #[error("rollout diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("training diverged at iteration {iteration}: {detail}")]
    TrainingDiverged { iteration: usize, detail: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Checkpoint decoding failures; each is a distinct variant.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic: expected \"BSDG\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated checkpoint: {what} needs {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("malformed checkpoint header: {0}")]
    Header(String),

    #[error("checkpoint header inconsistent with payload: {0}")]
    Inconsistent(String),
}

/// IDX image-file decoding failures.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic: expected 0x00000803, found {0:#010x}")]
    BadMagic(u32),

    #[error("expected 3 dimensions, header declares {0}")]
    DimCount(u8),

    #[error("payload length mismatch: header implies {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },

    #[error("empty dataset")]
    Empty,
}

pub(crate) fn shape_err(op: &'static str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Error {
    Error::Shape {
        op,
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}
