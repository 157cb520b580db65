//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MbsError {
    #[error("singular matrix ({context})")]
    SingularMatrix { context: String },

    #[error("constraint Jacobian rank deficient: rank {rank} < {expected} (redundant constraints unsupported)")]
    RankDeficient { rank: usize, expected: usize },

    #[error("Euler parameter norm {norm} deviates from 1 beyond tolerance")]
    NonUnitEulerParameters { norm: f64 },

    #[error("model validation failed: {0}")]
    InvalidModel(String),

    #[error("Newton iteration failed to converge in {iters} iterations (residual {residual:.3e})")]
    NewtonDiverged { iters: usize, residual: f64 },

    #[error("integration failed at t = {t}: {reason}")]
    IntegrationFailed { t: f64, reason: String },

    #[error("line search failed: {0}")]
    LineSearchFailed(String),

    #[error("parameter {index} = {value} outside bounds [{lower}, {upper}]")]
    OutOfBounds {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("expression parse error: {0}")]
    ExprParse(String),

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MbsError>;
