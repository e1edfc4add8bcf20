//! Unified error type for the crate.
//!
//! Validation routines that produce *reports* (network checks, monotonicity
//! probes) return data instead of errors; `Error` is reserved for conditions
//! that prevent an operation from producing a meaningful result.

use thiserror::Error;

use crate::profile::Profile;

#[derive(Debug, Error)]
pub enum Error {
    /// A vector or matrix had the wrong shape. `context` names the offending
    /// quantity, `agent` the agent it belongs to (if any).
    #[error("dimension mismatch{}: {context}: expected {expected}, got {got}", fmt_agent(*.agent))]
    Dimension {
        agent: Option<usize>,
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A parameter or configuration value is outside its documented domain.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A standing assumption required by the algorithms does not hold
    /// (step-size safeguard, connectivity, rank conditions, ...).
    #[error("assumption violated: {0}")]
    Assumption(String),

    /// A user-supplied gradient disagrees with finite differences of the cost.
    #[error(
        "gradient self-check failed for agent {agent} ({quantity}): \
         max relative error {max_err:.3e} at probe {probe}"
    )]
    GradientCheck {
        agent: usize,
        quantity: &'static str,
        max_err: f64,
        probe: usize,
    },

    /// The cyclic projection loop did not settle; the intersection is empty
    /// or too ill-conditioned for the sweep budget.
    #[error(
        "projection onto the intersection did not settle after {sweeps} sweeps \
         (last iterate change {residual:.3e}); the set is likely empty"
    )]
    InfeasibleProjection { residual: f64, sweeps: usize },

    /// An iterate became non-finite. Carries the last finite strategy profile
    /// so callers can inspect where the run blew up.
    #[error("divergence at iteration {iteration}: {quantity} became non-finite")]
    Divergence {
        iteration: usize,
        quantity: &'static str,
        last_finite: Box<Profile>,
    },

    /// A dual multiplier dipped below the numerical floor, which the
    /// step-size safeguard is supposed to rule out.
    #[error(
        "dual safeguard violated at iteration {iteration}: \
         min multiplier {lambda_min:.3e} (floor -1e-12)"
    )]
    DualSafeguard { iteration: usize, lambda_min: f64 },

    /// An iterative solver exhausted its budget before meeting its tolerance.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

}

fn fmt_agent(agent: Option<usize>) -> String {
    match agent {
        Some(i) => format!(" for agent {i}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for a dimension error tied to a specific agent.
    pub fn dim(agent: usize, context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            agent: Some(agent),
            context,
            expected,
            got,
        }
    }

    /// Shorthand for a dimension error not tied to an agent.
    pub fn dim_global(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            agent: None,
            context,
            expected,
            got,
        }
    }
}
