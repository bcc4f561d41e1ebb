//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty shape")]
    EmptyShape,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("stage {stage} out of range 1..={max}")]
    StageOutOfRange { stage: usize, max: usize },
    #[error("no object")]
    NoObject,
    #[error("unrecognized content")]
    UnrecognizedContent,
    #[error("zero energy")]
    ZeroEnergy,
    #[error("condition gap at t={t}")]
    ConditionGap { t: usize },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("empty dataset")]
    EmptyData,
    #[error("plan syntax error at byte {pos}: {msg}")]
    PlanSyntax { pos: usize, msg: String },
    #[error("plan overlap at stage {stage}")]
    PlanOverlap { stage: usize },
    #[error("unknown label value `{value}` for {field}")]
    UnknownLabel { field: &'static str, value: String },
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("malformed {format} data: {msg}")]
    Format { format: &'static str, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }

    pub fn format(format: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { format, msg: msg.into() }
    }
}
