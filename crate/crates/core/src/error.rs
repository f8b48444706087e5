use std::path::PathBuf;

use nngine::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed WAV header: {0}")]
    MalformedWav(String),
    #[error("unsupported channel count {0}")]
    UnsupportedChannels(u16),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("zero-length signal")]
    EmptySignal,
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("signal too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("sample-rate mismatch: expected {expected} Hz, got {actual} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("target signal is silent")]
    SilentTarget,
    #[error("interference set is silent")]
    SilentInterference,
    #[error("reference signal has zero energy")]
    ZeroReference,
    #[error("score set has an empty class ({0})")]
    EmptyClass(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing checkpoints: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingCheckpoints(Vec<PathBuf>),
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
