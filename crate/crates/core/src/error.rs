use thiserror::Error;

/// Errors raised anywhere in the tokenizer / LM pipeline.
#[derive(Debug, Error)]
pub enum SeedError {
    /// Invalid configuration or non-conforming shapes, tagged with the operation that rejected them.
    #[error("configuration error in {op}: {msg}")]
    Config { op: &'static str, msg: String },

    #[error("invalid input in {op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated record: {0}")]
    Truncated(String),

    #[error("record count mismatch: header declares {declared}, payload holds {found}")]
    CountMismatch { declared: usize, found: usize },

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(String),

    #[error("missing dataset {0}; run gen-data first")]
    MissingData(String),

    #[error("gradient check refused: {0}")]
    NonDeterministic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SeedError>;

pub(crate) fn config_err(op: &'static str, msg: impl Into<String>) -> SeedError {
    SeedError::Config { op, msg: msg.into() }
}

pub(crate) fn input_err(op: &'static str, msg: impl Into<String>) -> SeedError {
    SeedError::InvalidInput { op, msg: msg.into() }
}
