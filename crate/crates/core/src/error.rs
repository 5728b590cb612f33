use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("relative distance must be positive, got r = {0}")]
    NonPositiveRadius(f64),

    #[error("estimated time-to-go must be positive, got {0}")]
    NonPositiveTgo(f64),

    #[error("geometry is infeasible for minimum-radius turn (r = {r}, sigma = {sigma}, R_min = {r_min})")]
    InfeasibleGeometry { r: f64, sigma: f64, r_min: f64 },

    #[error("numerical blow-up: component magnitude {0:e} exceeds limit")]
    NumericalBlowup(f64),

    #[error("sensitivity matrix is singular (|det| = {0:e})")]
    SingularSensitivity(f64),

    #[error("costate refinement did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("too many grid nodes skipped: {skipped} of {total}")]
    TooManySkipped { skipped: usize, total: usize },

    #[error("local quadratic fit is rank-deficient at sample {0}")]
    DegenerateNeighborhood(usize),

    #[error("Gram matrix is not positive definite after jitter escalation")]
    NotPositiveDefinite,

    #[error("training set of {n} samples exceeds max_train_size {max}")]
    DataTooLarge { n: usize, max: usize },

    #[error("standard deviation must be positive, got {0}")]
    NonPositiveSigma(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
