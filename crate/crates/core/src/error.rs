use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("total step count must be positive")]
    ZeroHorizon,
    #[error("step {t} is past the horizon {total}")]
    StepOutOfRange { t: usize, total: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("{targets} targets exceed the {queries} available queries")]
    TooManyTargets { targets: usize, queries: usize },
    #[error("mismatched list lengths: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("labelled pool is empty")]
    EmptyLabelledPool,
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("malformed record at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { field: field.into(), reason: reason.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
