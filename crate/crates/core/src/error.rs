use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {len} samples, need at least n_fft = {n_fft}")]
    InputTooShort { len: usize, n_fft: usize },

    #[error("unknown window '{0}'")]
    UnknownWindow(String),

    #[error("reconstruction condition violated: {window} window with n_fft {n_fft} and hop {hop} does not overlap-add to a constant")]
    ReconstructionCondition {
        window: String,
        n_fft: usize,
        hop: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("configuration mismatch in {field}: {left} vs {right}")]
    ConfigMismatch {
        field: &'static str,
        left: String,
        right: String,
    },

    #[error("unaligned pair {index}: reference shape {reference_shape:?}, source shape {source_shape:?}")]
    UnalignedPair {
        index: usize,
        reference_shape: (usize, usize),
        source_shape: (usize, usize),
    },

    #[error("bin count mismatch: expected {expected}, got {actual}")]
    BinMismatch { expected: usize, actual: usize },

    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{path}: line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unsupported WAV data in '{chunk}' chunk: {detail}")]
    UnsupportedWav { chunk: &'static str, detail: String },

    #[error("malformed WAV file: {0}")]
    MalformedWav(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn mismatch(
        field: &'static str,
        left: impl ToString,
        right: impl ToString,
    ) -> Self {
        Error::ConfigMismatch {
            field,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the filesystem rather than of the data or the
    /// caller's parameters.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
