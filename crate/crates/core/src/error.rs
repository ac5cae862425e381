use std::path::PathBuf;

use mvad_autograd::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error("{}: {source}", path.display())]
    Feature {
        path: PathBuf,
        source: FeatureFileError,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("backend error (video {video_id:?}, retriable: {retriable}): {message}")]
    Backend {
        video_id: Option<String>,
        retriable: bool,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed {what} at byte {offset}: {message}")]
    Decode {
        what: &'static str,
        offset: usize,
        message: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Self::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

/// Decoding failures for the binary feature format. Offsets are byte
/// positions in the file where the problem was detected.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeatureFileError {
    #[error("bad magic at byte 0: expected \"MVADFEAT\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {found} at byte 8 (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("truncated header: need {expected} bytes, file has {actual}")]
    TruncatedHeader { expected: usize, actual: usize },
    #[error("truncated payload at byte {offset}: expected {expected} bytes, got {actual}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{extra} trailing bytes after payload at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("zero {field} at byte {offset}")]
    Zero { field: &'static str, offset: usize },
    #[error("payload size overflows: {rows} x {cols}")]
    Overflow { rows: u32, cols: u32 },
}
