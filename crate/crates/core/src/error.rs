use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the solver pipeline.
///
/// `is_numerical` separates failures of the numerics (contraction, monotonicity,
/// convergence, non-finite values) from bad input, which the CLI maps to
/// distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    Validation(ValidationReport),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(
        "contraction check failed: |sum c_j - Gamma|/r = {value:.6e} is not < 1 (sum c_j = {weight_sum:.12}, Gamma = {total_mass:.12}, r = {rate})"
    )]
    Contraction {
        value: f64,
        weight_sum: f64,
        total_mass: f64,
        rate: f64,
    },

    #[error("monotonicity check failed at x = {x} (index {x_index}), regime {regime}: {detail}")]
    Monotonicity {
        x: f64,
        x_index: usize,
        regime: usize,
        detail: String,
    },

    #[error("non-finite value {value} at node (s={s}, x={x}, y={y}, regime={regime})")]
    Numeric {
        value: f64,
        s: usize,
        x: usize,
        y: usize,
        regime: usize,
    },

    #[error("no convergence after {iterations} iterations (last residual {last:.3e})", last = residuals.last().copied().unwrap_or(f64::NAN))]
    Convergence {
        iterations: usize,
        residuals: Vec<f64>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Contraction { .. }
                | Error::Monotonicity { .. }
                | Error::Numeric { .. }
                | Error::Convergence { .. }
        )
    }
}
