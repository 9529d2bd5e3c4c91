use std::io;

use thiserror::Error;

/// Errors produced by the operator, its file formats and its analysis tools.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("factor list is empty")]
    EmptyFactorList,

    #[error("root finding did not converge for polynomial of degree {degree}")]
    RootFindingDiverged { degree: usize },

    #[error("non-finite value at batch {batch}, token {token}")]
    NonFiniteDetected { batch: usize, token: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("{what}: error {error:e} exceeds tolerance {tolerance:e}")]
    MismatchBeyondTolerance {
        what: String,
        error: f64,
        tolerance: f64,
    },

    #[error("transfer function evaluated at a pole (|Q| = {0:e})")]
    PoleEvaluation(f64),

    #[error("denominator is not Schur stable (max pole modulus {0})")]
    Unstable(f64),

    #[error("bad magic bytes {0:?}, expected \"TCPT\"")]
    BadMagic([u8; 4]),

    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("unsupported dtype {0:?}")]
    DtypeUnsupported(String),

    #[error("malformed header: {0}")]
    BadHeader(String),

    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteDetected { .. }
            | Error::NonFiniteGradient(_)
            | Error::RootFindingDiverged { .. }
            | Error::PoleEvaluation(_) => 3,
            Error::Unstable(_) => 4,
            Error::MismatchBeyondTolerance { .. } => 5,
            _ => 2,
        }
    }
}
