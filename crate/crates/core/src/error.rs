//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in parameter `{0}`; optimizer step rejected")]
    NonFiniteGradient(String),

    #[error("training aborted at step {step}: {reason}{}", match .last_checkpoint {
        Some(p) => format!(" (last good checkpoint retained at {p})"),
        None => String::new(),
    })]
    TrainingAborted {
        step: u64,
        reason: String,
        last_checkpoint: Option<String>,
    },

    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error("config error at line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("class `{class}` has only {count} members, needs at least {needed}")]
    ClassTooSmall {
        class: String,
        count: usize,
        needed: usize,
    },

    #[error("zero-norm feature vector in row `{0}`")]
    ZeroNorm(String),

    #[error("slide generation failed: tissue floor not met after {0} attempts")]
    TissueFloor(u32),

    #[error("aborted writing {path}: {source}; partial output left in place")]
    PartialWrite {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
