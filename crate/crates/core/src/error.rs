use thiserror::Error;

use crate::crystal::CrystalConfiguration;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("phase branch lost at t = {t}: the solution passes through zero")]
    BranchFailure { t: f64 },

    #[error("node collapse at t = {t}: u(t) vanishes")]
    NodeCollapse { t: f64 },

    #[error("grid resolution insufficient: {0}")]
    Resolution(String),

    #[error("operating point is not stable (trace = {trace}); no pseudopotential frequency")]
    NoPseudopotential { trace: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix decomposition failed: {0}")]
    Decomposition(String),

    #[error("trajectory escaped |q| > {bound} at t = {t}")]
    Escape { t: f64, bound: f64 },

    #[error("packet invariants drifted by {drift:e} (limit {limit:e}); use a smaller tolerance")]
    Accuracy { drift: f64, limit: f64 },

    #[error("packet invariants violated: {0}")]
    InvariantViolation(String),

    #[error("ions {first} and {second} coincide")]
    Singularity { first: usize, second: usize },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    IterationLimit {
        iterations: usize,
        residual: f64,
        best: Box<CrystalConfiguration>,
    },

    #[error("simulation box too small: boundary mass {mass:e}")]
    BoxTooSmall { mass: f64 },
}
