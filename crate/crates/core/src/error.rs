use thiserror::Error;

/// Errors produced by the solvers, the trainer and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension { what: &'static str, expected: String, got: String },

    #[error("unconstrained solution undefined: {0}")]
    Singular(String),

    #[error("bisection on the power multiplier did not converge after {steps} steps (nu in [{lo:e}, {hi:e}], power {power:e}, budget {budget:e})")]
    Bisection { steps: usize, lo: f64, hi: f64, power: f64, budget: f64 },

    #[error("non-finite {what} (batch seed {seed})")]
    NonFinite { what: String, seed: u64 },

    #[error("missing trained schedule {path}; run `robustbf train --config <cfg> --sweep {sweep}` first")]
    MissingSchedule { path: String, sweep: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed channel dump: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Failures of the numerical pipeline (as opposed to bad inputs or I/O).
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::Singular(_) | Error::Bisection { .. } | Error::NonFinite { .. } | Error::MissingSchedule { .. }
        )
    }

    pub(crate) fn dims(what: &'static str, expected: (usize, usize), got: (usize, usize)) -> Self {
        Error::Dimension {
            what,
            expected: format!("{}x{}", expected.0, expected.1),
            got: format!("{}x{}", got.0, got.1),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
