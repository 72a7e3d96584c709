//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("evaluation time {t} outside domain [{lo}, {hi}]")]
    OutOfDomain { t: f64, lo: f64, hi: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    #[error("state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("sweep failed to reach a fixed point after {iterations} iterations (last defect {last_defect:.3e})")]
    SweepDiverged {
        iterations: usize,
        last_defect: f64,
        defect_history: Vec<f64>,
    },

    #[error("Newton stalled with best residual norm {best_residual:.3e}")]
    NewtonStalled { best_residual: f64 },

    #[error("homotopy stuck at s = {s} (delays {tau:?}): {why}")]
    HomotopyStuck { s: f64, tau: [f64; 3], why: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error in {context}: {why}")]
    Parse { context: String, why: String },
}

impl Error {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            why: why.into(),
        }
    }

    /// True for errors that indicate a bad problem/config rather than a
    /// numerical failure at runtime.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Invalid { .. }
                | Error::DimensionMismatch { .. }
                | Error::Parse { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
