use std::fmt;

/// Errors produced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid value at index {index}: {reason}")]
    InvalidValue { index: usize, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid ternary code {value} at ({row}, {col})")]
    InvalidCode { row: usize, col: usize, value: i32 },
    #[error("corrupted packed field (pattern 10) at ({row}, {col})")]
    CorruptedField { row: usize, col: usize },
    #[error("accumulator overflow risk: depth {depth} exceeds {limit}")]
    OverflowRisk { depth: usize, limit: usize },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("syntax error on line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("geometry error in layer `{layer}`: {message}")]
    LayerGeometry { layer: String, message: String },
    #[error("topology has no leading `input` line")]
    MissingInput,
    #[error("scheme `{0}` requires a trained teacher")]
    MissingTeacher(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn spec(msg: impl fmt::Display) -> Self {
        Error::InvalidSpec(msg.to_string())
    }

    pub(crate) fn shape(msg: impl fmt::Display) -> Self {
        Error::ShapeMismatch(msg.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
