use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: invalid UTF-8")]
    InvalidUtf8 { line: usize },

    #[error("no training text")]
    NoTrainingText,

    #[error("no seed signal: seed dictionary empty and no identical tokens or numerals across vocabularies")]
    NoSeedSignal,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("token {index} out of range for vocabulary of size {size}")]
    TokenOutOfRange { index: usize, size: usize },

    #[error("zero vector for token {0:?}")]
    ZeroVector(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite stage: {0}")]
    MissingStage(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl Error {
    /// Stable snake-case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::InvalidUtf8 { .. } => "invalid_utf8",
            Error::NoTrainingText => "no_training_text",
            Error::NoSeedSignal => "no_seed_signal",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Format { .. } => "format",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::ZeroVector(_) => "zero_vector",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::NonFinite(_) => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingStage(_) => "missing_stage",
            Error::Json(_) => "json",
        }
    }

    /// Stable positive integer per variant, used as a process exit code
    /// and across the C interface.
    pub fn code(&self) -> i32 {
        match self {
            Error::Io { .. } => 1,
            Error::InvalidUtf8 { .. } => 2,
            Error::NoTrainingText => 3,
            Error::NoSeedSignal => 4,
            Error::InvalidArgument(_) => 5,
            Error::Format { .. } => 6,
            Error::TokenOutOfRange { .. } => 7,
            Error::ZeroVector(_) => 8,
            Error::DimensionMismatch { .. } => 9,
            Error::SequenceTooLong { .. } => 10,
            Error::NonFinite(_) => 11,
            Error::Checkpoint(_) => 12,
            Error::MissingStage(_) => 13,
            Error::Json(_) => 14,
        }
    }
}
