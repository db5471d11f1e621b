use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav decoding failed: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("clip sample rate {clip} Hz does not match configured {config} Hz")]
    SampleRateMismatch { clip: u32, config: u32 },
    #[error("annotation error: {0}")]
    Annotation(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("tensor file error: {0}")]
    TensorFormat(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("statistics: {0}")]
    Stats(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
