use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum AweError {
    #[error("utterance too short: {samples} samples, need at least {window} for one window")]
    UtteranceTooShort { samples: usize, window: usize },

    #[error("unsupported sample rate {0} Hz")]
    UnsupportedSampleRate(u32),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("bad {kind} file: {message}")]
    Format { kind: &'static str, message: String },

    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),

    #[error("unknown utterance id {0:?}")]
    UnknownUtterance(String),

    #[error("no valid positive pairs for language(s): {}", .0.join(", "))]
    NoPairs(Vec<String>),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm vector at index {0}; cosine similarity is undefined")]
    ZeroNorm(usize),

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    #[error("cannot draw {needed} negatives: only {available} segments of a different word type")]
    InsufficientNegatives { needed: usize, available: usize },

    #[error("AP undefined: no same-word different-speaker pairs")]
    ApUndefined,

    #[error("language {0:?} is used both for training and for model selection/evaluation")]
    LanguageLeak(String),

    #[error("unknown language {0:?}")]
    UnknownLanguage(String),

    #[error("query word {0:?} is not in the ground-truth vocabulary")]
    UnknownQueryWord(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("toml: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, AweError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AweError {
    let path = path.into();
    move |source| AweError::Io { path, source }
}
