//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("fiber matrix is not Hermitian at x = {x} (residual {residual:e})")]
    NonHermitianFiber { x: f64, residual: f64 },
    #[error("bands {lower} and {upper} are degenerate at x = {x} (separation {separation:e})")]
    DegenerateBand { x: f64, lower: usize, upper: usize, separation: f64 },
    #[error("gap {gap} below threshold {threshold} at x = {x}")]
    GapViolation { x: f64, gap: f64, threshold: f64 },
    #[error("split-step self-check failed: change {change:e} after {halvings} halvings")]
    StepSizeTooLarge { change: f64, halvings: usize },
    #[error("Krylov propagation broke down: {0}")]
    KrylovBreakdown(String),
    #[error("fiber data not smooth enough: relative Fourier tail {tail:e}")]
    RoughFiber { tail: f64 },
    #[error("idempotency defect {defect} is not below 1/4")]
    DefectTooLarge { defect: f64 },
    #[error("photon mode k = {k} is resonant with the gap {gap}")]
    ResonantMode { k: f64, gap: f64 },
    #[error("energy difference {gap} at x = {x} is not positive")]
    WrongSign { x: f64, gap: f64 },
    #[error("time quadrature did not converge: relative change {rel_change:e}")]
    QuadratureNotConverged { rel_change: f64 },
    #[error("non-positive value {value} at index {index}")]
    NonPositiveValue { index: usize, value: f64 },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation: {0}")]
    Validation(String),
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("no convergence: {0}")]
    Convergence(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BudgetExceeded(_) => 3,
            Error::StepSizeTooLarge { .. }
            | Error::KrylovBreakdown(_)
            | Error::RoughFiber { .. }
            | Error::DefectTooLarge { .. }
            | Error::QuadratureNotConverged { .. }
            | Error::Convergence(_) => 4,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
