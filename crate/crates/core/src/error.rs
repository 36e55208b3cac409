use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("frame of {len} samples is too short: at least {min} samples required ({what})")]
    FrameTooShort {
        len: usize,
        min: usize,
        what: &'static str,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("signal power is zero; SNR is undefined")]
    ZeroPower,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{what}: {path}: {source}")]
    Io {
        what: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("stream endpoint {endpoint}: {detail}")]
    Endpoint { endpoint: String, detail: String },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"DME1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("payload checksum mismatch: header {expected:016x}, computed {computed:016x}")]
    ChecksumMismatch { expected: u64, computed: u64 },
    #[error("payload contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("feature configuration mismatch: checkpoint has {checkpoint}, requested {requested}")]
    FeatureMismatch { checkpoint: String, requested: String },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(what: &'static str, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            what,
            path: path.into(),
            source,
        }
    }
}
