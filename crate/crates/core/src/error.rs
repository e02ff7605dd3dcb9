use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OtError>;

/// Every failure the solver stack can report.
#[derive(Debug, Error)]
pub enum OtError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A plan entry would exceed the representable range; usually a broken warm start.
    #[error("overflow: log plan entry {log_value:.3} at ({row}, {col}) exceeds 700")]
    Overflow { row: usize, col: usize, log_value: f64 },

    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("CG did not converge in {iters} iterations (residual l1 {residual_l1:.3e})")]
    CgNonConvergence {
        iters: usize,
        residual_l1: f64,
        best: Vec<f64>,
    },

    #[error("discount annealing stagnated at rho = {rho} (residual l1 {residual_l1:.3e}, target {target:.3e})")]
    /// `best` is the direction from the last discount level and `cg_iters`
    /// the CG work spent; callers may still use `best`, which is a descent
    /// direction.
    Stagnation {
        rho: f64,
        residual_l1: f64,
        target: f64,
        best: Vec<f64>,
        cg_iters: usize,
    },

    #[error("{what} did not converge within {budget} steps (gradient l1 {grad_norm_l1:.3e}, target {target:.3e})")]
    NonConvergence {
        what: &'static str,
        budget: usize,
        grad_norm_l1: f64,
        target: f64,
    },

    #[error("line search failed: step size fell below {min_alpha:e} (gradient l1 {grad_norm_l1:.3e})")]
    LineSearch { min_alpha: f64, grad_norm_l1: f64 },

    #[error("not a descent direction: <-grad, d> = {slope:e}")]
    NotDescent { slope: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("outer iteration {t} (gamma = {gamma}): {source}")]
    Outer {
        t: usize,
        gamma: f64,
        #[source]
        source: Box<OtError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl OtError {
    /// Strips outer-iteration context.
    pub fn root(&self) -> &OtError {
        match self {
            OtError::Outer { source, .. } => source.root(),
            e => e,
        }
    }
}
