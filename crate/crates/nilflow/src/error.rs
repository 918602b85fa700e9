//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A quantity that must be symmetric positive definite is not.
    #[error("matrix is not symmetric positive definite{0}")]
    NotSpd(String),

    /// The base metric must be positive everywhere.
    #[error("base metric is not positive{0}")]
    NonpositiveBaseMetric(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// State invariant violated during time stepping. Carries a diagnostic
    /// dump of where the run died.
    #[error("flow state invalid at t={t}: {reason}")]
    InvalidState { t: f64, reason: String },

    /// Adaptive step size collapsed below the configured floor.
    #[error("step size underflow at t={t}: dt={dt:.3e} < dt_min={dt_min:.3e}")]
    StepSizeUnderflow { t: f64, dt: f64, dt_min: f64 },

    /// A trajectory does not cover the time window an operation needs.
    #[error("trajectory covers [{have_lo}, {have_hi}] but [{want_lo}, {want_hi}] is required")]
    WindowNotCovered {
        have_lo: f64,
        have_hi: f64,
        want_lo: f64,
        want_hi: f64,
    },

    /// Snapshot cadence is too coarse for the requested check.
    #[error("cadence too coarse: {0}")]
    CadenceTooCoarse(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("malformed snapshot file: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
