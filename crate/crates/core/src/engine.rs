//! Shared plumbing for the two distributed engines: round scheduling,
//! run options, snapshots, and the information-locality guard.
//!
//! Both engines run synchronous rounds: every agent's update is computed
//! from the pre-round state, then all states commit at once (double
//! buffering).  The optional parallel mode farms the per-agent computation
//! out to a thread pool; because each agent's arithmetic is self-contained
//! and commits happen in agent order, parallel rounds are bit-identical to
//! sequential ones.

use serde::Serialize;

use crate::profile::Profile;

/// How the per-agent computations of one synchronous round are scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RoundMode {
    #[default]
    Sequential,
    /// Rayon-parallel over agents with a barrier at the end of the round.
    Parallel,
}

/// Which message field a cross-agent read touched, for the locality guard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum MsgField {
    /// Aggregate tracker z_j.
    Tracker,
    /// Aggregation value φ_j(x_j).
    Aggregate,
    /// Local multiplier λ_j.
    Dual,
    /// Constraint tracker y_j.
    ConstraintTracker,
    /// Scaled local constraint value N(A_j x_j - b_j).
    ConstraintValue,
}

/// One cross-agent read: `receiver` consumed `field` published by `sender`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct MsgRead {
    pub receiver: usize,
    pub sender: usize,
    pub field: MsgField,
}

/// Stopping and recording options for a full run.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub max_iters: usize,
    /// Threshold on the step-size-normalized update norm ‖x⁺ − x‖/δ; `None`
    /// disables early stopping and runs exactly `max_iters` rounds.
    pub tol: Option<f64>,
    /// Reference solution; when present each trace row carries ‖x − x*‖.
    pub oracle: Option<Profile>,
    pub record_trace: bool,
    /// Record a full state snapshot every k rounds (and at round 0).
    pub snapshot_every: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_iters: 10_000,
            tol: Some(1e-10),
            oracle: None,
            record_trace: true,
            snapshot_every: None,
        }
    }
}

impl RunOptions {
    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_tol(mut self, tol: Option<f64>) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_oracle(mut self, oracle: Profile) -> Self {
        self.oracle = Some(oracle);
        self
    }

    pub fn with_snapshots(mut self, every: usize) -> Self {
        self.snapshot_every = Some(every.max(1));
        self
    }
}

/// Full engine state at one round, for diagnostics that need more than the
/// scalar trace columns.  Multiplier and constraint-tracker fields stay
/// empty for engines that do not carry them.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub iter: usize,
    pub x: Profile,
    /// Per-agent aggregate trackers z_i (observer view).
    pub z: Vec<nalgebra::DVector<f64>>,
    pub lambda: Vec<nalgebra::DVector<f64>>,
    pub y: Vec<nalgebra::DVector<f64>>,
}

/// Why a run returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StopReason {
    Converged,
    MaxIters,
}

/// Result of a full run, generic over the engine's trace-row type.
#[derive(Clone, Debug)]
pub struct RunReport<R> {
    pub iterations: usize,
    pub stop: StopReason,
    pub final_step_norm: f64,
    pub rows: Vec<R>,
    pub snapshots: Vec<Snapshot>,
}

impl<R> RunReport<R> {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }
}
