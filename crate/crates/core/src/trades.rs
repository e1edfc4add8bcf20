//! Distributed equilibrium seeking for games with local constraints only.
//!
//! Each agent holds its strategy block x_i and an aggregate tracker z_i.
//! One synchronous round does
//!
//! ```text
//! x_i⁺ = x_i + δ ( P_{X_i}[ x_i − γ F̃_i(x_i, φ_i(x_i) + z_i) ] − x_i )
//! z_i⁺ = Σ_j w_ij z_j + Σ_j w_ij φ_j(x_j) − φ_i(x_i)
//! ```
//!
//! with every quantity read from the pre-round state.  φ_i(x_i) + z_i is
//! agent i's running estimate of the aggregate σ(x); the z-recursion is a
//! perturbed average consensus whose mean stays exactly zero under a doubly
//! stochastic weight matrix, so the estimates track σ(x) as the strategies
//! move.  Tracker storage is compensated (hi/lo pairs) to keep that zero-mean
//! invariant tight over hundreds of thousands of rounds; observers and
//! messages use the full compensated value.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::engine::{MsgField, MsgRead, RoundMode, RunOptions, RunReport, Snapshot, StopReason};
use crate::error::{Error, Result};
use crate::game::{AggregativeGame, ProbeRegion};
use crate::network::CommNetwork;
use crate::numeric::{CompVec, Compensated};
use crate::profile::Profile;
use crate::trace::TradesRow;

/// Probe budget for the init-time step-size sanity check.
const INIT_PROBE_PAIRS: usize = 32;
const INIT_PROBE_SEED: u64 = 0x7ead_e501;

#[derive(Clone, Copy, Debug)]
pub struct TradesParams {
    /// Relaxation step δ ∈ (0, 1).
    pub delta: f64,
    /// Gradient step γ > 0.
    pub gamma: f64,
}

impl Default for TradesParams {
    fn default() -> Self {
        TradesParams {
            delta: 0.5,
            gamma: 0.001,
        }
    }
}

impl TradesParams {
    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "relaxation step delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gradient step gamma must be positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Per-round scalar diagnostics returned by [`Trades::step`].
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    /// ‖x⁺ − x‖ / δ, the fixed-point residual of the projected update.
    pub step_norm: f64,
}

struct AgentOut {
    x_next: DVector<f64>,
    z_next: CompVec,
    move_sq: f64,
    reads: Vec<MsgRead>,
}

pub struct Trades<'a> {
    game: &'a AggregativeGame,
    net: &'a CommNetwork,
    params: TradesParams,
    mode: RoundMode,
    guard: bool,
    x: Profile,
    z: Vec<CompVec>,
    iter: usize,
    reads: Vec<MsgRead>,
    warnings: Vec<String>,
    x0_projection_distance: f64,
}

impl<'a> Trades<'a> {
    /// Set up a run: validates parameters and the network, projects the
    /// start profile onto the local sets (recording how far it moved), and
    /// zeroes the trackers.
    pub fn new(
        game: &'a AggregativeGame,
        net: &'a CommNetwork,
        params: TradesParams,
        x0: &Profile,
    ) -> Result<Self> {
        params.validate()?;
        if game.n_agents() != net.n_agents() {
            return Err(Error::dim_global(
                "agents vs network nodes",
                game.n_agents(),
                net.n_agents(),
            ));
        }
        if x0.layout() != game.layout() {
            return Err(Error::dim_global(
                "start profile length",
                game.layout().total_dim(),
                x0.total_dim(),
            ));
        }
        net.validate().into_result()?;

        let x = game.project_profile(x0)?;
        let x0_projection_distance = x.distance(x0);

        let mut warnings = Vec::new();
        let region = ProbeRegion::around(&x, 1.0);
        if let Ok(est) = game.estimate_monotonicity(&region, INIT_PROBE_PAIRS, INIT_PROBE_SEED) {
            let bound = est.gamma_upper();
            if params.gamma >= bound {
                warnings.push(format!(
                    "gamma = {:.3e} is not inside the certified contraction range \
                     (0, {:.3e}) from probe estimates mu = {:.3e}, L = {:.3e}; \
                     convergence is not guaranteed",
                    params.gamma, bound, est.mu_hat, est.l_hat
                ));
            }
        }

        let d = game.agg_dim();
        let z = (0..game.n_agents()).map(|_| CompVec::zeros(d)).collect();
        Ok(Trades {
            game,
            net,
            params,
            mode: RoundMode::Sequential,
            guard: false,
            x,
            z,
            iter: 0,
            reads: Vec::new(),
            warnings,
            x0_projection_distance,
        })
    }

    pub fn set_mode(&mut self, mode: RoundMode) {
        self.mode = mode;
    }

    /// Record every cross-agent read in subsequent rounds (test hook).
    pub fn set_guard(&mut self, on: bool) {
        self.guard = on;
    }

    pub fn take_reads(&mut self) -> Vec<MsgRead> {
        std::mem::take(&mut self.reads)
    }

    pub fn params(&self) -> TradesParams {
        self.params
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn x(&self) -> &Profile {
        &self.x
    }

    /// Observer view of agent i's tracker (compensation folded in).
    pub fn z(&self, i: usize) -> DVector<f64> {
        &self.z[i].hi + &self.z[i].lo
    }

    /// How far the supplied start profile was from local feasibility.
    pub fn x0_projection_distance(&self) -> f64 {
        self.x0_projection_distance
    }

    #[cfg(test)]
    fn force_tracker(&mut self, i: usize, v: &DVector<f64>) {
        self.z[i].hi.copy_from(v);
        self.z[i].lo.fill(0.0);
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn compute_agent(&self, i: usize, phis: &[DVector<f64>]) -> Result<AgentOut> {
        let x_i = self.x.block_owned(i);
        let d = self.game.agg_dim();

        // Aggregate estimate: own contribution plus tracker.
        let s = &phis[i] + &self.z[i].hi + &self.z[i].lo;
        let g = self.game.f_tilde(i, &x_i, &s);
        let target = &x_i - g * self.params.gamma;
        let p = self.game.agent(i).local_set.project(&target)?;
        let dir = p - &x_i;
        let move_sq = dir.norm_squared();
        let x_next = &x_i + dir * self.params.delta;

        // Consensus mix of trackers, perturbed by the aggregation values.
        // Per-component compensated accumulation in fixed neighbor order so
        // sequential and parallel rounds are bit-identical.
        let mut reads = Vec::new();
        let mut acc = vec![Compensated::new(0.0); d];
        for &(j, w) in self.net.in_neighbors(i) {
            let zj = &self.z[j];
            let pj = &phis[j];
            for (k, a) in acc.iter_mut().enumerate() {
                a.add_prod(w, zj.hi[k]);
                a.add_prod(w, zj.lo[k]);
                a.add_prod(w, pj[k]);
            }
            if self.guard && j != i {
                reads.push(MsgRead {
                    receiver: i,
                    sender: j,
                    field: MsgField::Tracker,
                });
                reads.push(MsgRead {
                    receiver: i,
                    sender: j,
                    field: MsgField::Aggregate,
                });
            }
        }
        let mut z_next = CompVec::zeros(d);
        for (k, a) in acc.iter_mut().enumerate() {
            a.add(-phis[i][k]);
            z_next.set(k, *a);
        }

        if !(x_next.iter().all(|v| v.is_finite()) && z_next.hi.iter().all(|v| v.is_finite())) {
            return Err(Error::Divergence {
                iteration: self.iter,
                quantity: "strategy or tracker update",
                last_finite: Box::new(self.x.clone()),
            });
        }
        Ok(AgentOut {
            x_next,
            z_next,
            move_sq,
            reads,
        })
    }

    /// One synchronous round; state is untouched if any agent fails.
    pub fn step(&mut self) -> Result<StepInfo> {
        let phis = self.game.phis(&self.x);
        let n = self.game.n_agents();
        let outs: Vec<AgentOut> = match self.mode {
            RoundMode::Sequential => (0..n)
                .map(|i| self.compute_agent(i, &phis))
                .collect::<Result<_>>()?,
            RoundMode::Parallel => (0..n)
                .into_par_iter()
                .map(|i| self.compute_agent(i, &phis))
                .collect::<Result<_>>()?,
        };

        let mut move_sq = 0.0;
        for (i, out) in outs.into_iter().enumerate() {
            self.x.set_block(i, &out.x_next);
            self.z[i] = out.z_next;
            move_sq += out.move_sq;
            self.reads.extend(out.reads);
        }
        self.iter += 1;
        Ok(StepInfo {
            step_norm: move_sq.sqrt(),
        })
    }

    /// Max over agents of ‖φ_i(x_i) + z_i − σ(x)‖ and the tracker-mean norm
    /// ‖(1/N) Σ_i z_i‖∞, both at the current state.
    fn tracking_stats(&self) -> (f64, f64) {
        let phis = self.game.phis(&self.x);
        let sigma = self.game.sigma(&self.x);
        let n = self.game.n_agents();
        let d = self.game.agg_dim();

        let mut worst: f64 = 0.0;
        for (i, phi) in phis.iter().enumerate() {
            let est = phi + &self.z[i].hi + &self.z[i].lo - &sigma;
            worst = worst.max(est.norm());
        }
        let mut mean: f64 = 0.0;
        for k in 0..d {
            let mut acc = Compensated::new(0.0);
            for z in &self.z {
                acc.add(z.hi[k]);
                acc.add(z.lo[k]);
            }
            mean = mean.max((acc.value() / n as f64).abs());
        }
        (worst, mean)
    }

    fn trace_row(&self, step_norm: f64, oracle: Option<&Profile>, wall_ns: u64) -> TradesRow {
        let (tracking_err_max, mean_z_norm) = self.tracking_stats();
        TradesRow {
            iter: self.iter as u64,
            err_to_oracle: oracle.map(|o| self.x.distance(o)),
            step_norm,
            tracking_err_max,
            mean_z_norm,
            wall_ns,
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            iter: self.iter,
            x: self.x.clone(),
            z: (0..self.z.len()).map(|i| self.z(i)).collect(),
            lambda: Vec::new(),
            y: Vec::new(),
        }
    }

    /// Run rounds until the step norm drops below `tol` or the budget runs
    /// out.  Non-finite iterates surface as a divergence error carrying the
    /// last finite profile.
    pub fn run(&mut self, opts: &RunOptions) -> Result<RunReport<TradesRow>> {
        let mut rows = Vec::new();
        let mut snapshots = Vec::new();
        if opts.record_trace {
            rows.push(self.trace_row(f64::NAN, opts.oracle.as_ref(), 0));
        }
        if opts.snapshot_every.is_some() {
            snapshots.push(self.snapshot());
        }

        let mut stop = StopReason::MaxIters;
        let mut last_step_norm = f64::NAN;
        for t in 1..=opts.max_iters {
            let tick = Instant::now();
            let info = self.step()?;
            let wall_ns = tick.elapsed().as_nanos() as u64;
            last_step_norm = info.step_norm;
            if opts.record_trace {
                rows.push(self.trace_row(info.step_norm, opts.oracle.as_ref(), wall_ns));
            }
            if let Some(every) = opts.snapshot_every {
                if t % every == 0 {
                    snapshots.push(self.snapshot());
                }
            }
            if let Some(tol) = opts.tol {
                if info.step_norm <= tol {
                    stop = StopReason::Converged;
                    break;
                }
            }
        }
        Ok(RunReport {
            iterations: self.iter,
            stop,
            final_step_norm: last_step_norm,
            rows,
            snapshots,
        })
    }
}

/// Centralized relaxation x⁺ = x + δ(P_X[x − γF(x)] − x) with exact
/// knowledge of σ(x) — the reference dynamics the distributed rounds track.
/// With `projection = None` the game's own local sets are applied blockwise;
/// a stacked-space operator can be supplied instead.  δ = 1 is admissible
/// here (plain projected pseudo-gradient); its fixed points are the game's
/// equilibria.
pub fn reduced_step(
    game: &AggregativeGame,
    projection: Option<&crate::projection::ProjectionOperator>,
    x: &Profile,
    delta: f64,
    gamma: f64,
) -> Result<Profile> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Config(format!(
            "relaxation step delta must lie in (0, 1], got {delta}"
        )));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!(
            "gradient step gamma must be positive, got {gamma}"
        )));
    }
    if x.layout() != game.layout() {
        return Err(Error::dim_global(
            "profile length",
            game.layout().total_dim(),
            x.total_dim(),
        ));
    }
    let f = game.pseudo_gradient(x);
    let target = Profile::from_flat(
        game.layout().clone(),
        x.as_vector() - f.as_vector() * gamma,
    )?;
    let projected = match projection {
        None => game.project_profile(&target)?,
        Some(p) => Profile::from_flat(game.layout().clone(), p.project(target.as_vector())?)?,
    };
    Ok(Profile::from_flat(
        game.layout().clone(),
        x.as_vector() + (projected.as_vector() - x.as_vector()) * delta,
    )?)
}

/// Tracking-error energy Σ_i ‖z_i + φ_i(x_i) − σ(x)‖² per round when the
/// strategies are pinned at `x` and only the tracker recursion runs.  The
/// returned series starts at round 0 (z = 0); successive ratios are bounded
/// by the square of the network contraction factor.
pub fn frozen_tracking_energies(
    game: &AggregativeGame,
    net: &CommNetwork,
    x: &Profile,
    rounds: usize,
) -> Result<Vec<f64>> {
    if game.n_agents() != net.n_agents() {
        return Err(Error::dim_global(
            "agents vs network nodes",
            game.n_agents(),
            net.n_agents(),
        ));
    }
    if x.layout() != game.layout() {
        return Err(Error::dim_global(
            "profile length",
            game.layout().total_dim(),
            x.total_dim(),
        ));
    }
    let phis = game.phis(x);
    let sigma = game.sigma(x);
    let n = game.n_agents();
    let mut z: Vec<DVector<f64>> = vec![DVector::zeros(game.agg_dim()); n];

    let energy = |z: &[DVector<f64>]| -> f64 {
        (0..n)
            .map(|i| (&z[i] + &phis[i] - &sigma).norm_squared())
            .sum()
    };

    let mut out = Vec::with_capacity(rounds + 1);
    out.push(energy(&z));
    for _ in 0..rounds {
        let mut next = vec![DVector::zeros(game.agg_dim()); n];
        for (i, nx) in next.iter_mut().enumerate() {
            for &(j, w) in net.in_neighbors(i) {
                *nx += (&z[j] + &phis[j]) * w;
            }
            *nx -= &phis[i];
        }
        z = next;
        out.push(energy(&z));
    }
    Ok(out)
}
