//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the primitive's shape rule.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A primitive produced a NaN or infinite value.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss and the run was aborted.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    /// A classification target is outside the valid class range.
    #[error("invalid class index {index} for {classes} classes")]
    InvalidClassIndex { index: usize, classes: usize },

    /// The finite-difference oracle detected a non-deterministic function.
    #[error("oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 configuration, 2 divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Divergence(_) => 2,
            Error::Io(_) => 3,
            _ => 1,
        }
    }
}
