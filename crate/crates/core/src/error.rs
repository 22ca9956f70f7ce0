use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("parse error in {file} at line {line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("infeasible problem; violated rows: {rows:?}")]
    Infeasible { rows: Vec<String> },

    #[error("no degree-{beta} certificate for this policy (best slack {slack:e})")]
    NoCertificate { beta: usize, slack: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("non-finite field value at step {step}")]
    NonFinite { step: usize },

    #[error("unsupported dimension {0} for this operation")]
    UnsupportedDimension(usize),

    #[error("learning failure: {0}")]
    Learning(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
