//! Distributed generalized-equilibrium seeking under shared affine
//! constraints Σ_i (A_i x_i − b_i) ≤ 0.
//!
//! On top of the aggregate tracker z_i of the local-constraint engine, each
//! agent carries a multiplier λ_i and a constraint tracker y_i so that
//! N(A_i x_i − b_i) + y_i estimates the global constraint value.  One
//! synchronous round does
//!
//! ```text
//! x_i⁺ = x_i − δ F̃_i(x_i, φ_i + z_i) − δ G_{x,i}(N(A_i x_i − b_i) + y_i, λ_i)
//! λ_i⁺ = Σ_j w_ij λ_j + δ G_{λ,i}(N(A_i x_i − b_i) + y_i, λ_i)
//! z_i⁺ = Σ_j w_ij (z_j + φ_j) − φ_i
//! y_i⁺ = Σ_j w_ij (y_j + N(A_j x_j − b_j)) − N(A_i x_i − b_i)
//! ```
//!
//! G_x and G_λ are the gradients of a piecewise-quadratic penalty whose dual
//! update needs no projection: as long as every self weight satisfies
//! w_ii > δ/ρ and λ⁰ ≥ 0, the multipliers stay non-negative on their own.
//! That inequality is enforced at construction and (optionally) re-checked
//! against a −1e-12 floor every round.
//!
//! Local feasible sets are not supported here: an agent supplying anything
//! other than a free set is rejected, since the x-update has no projection.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::engine::{MsgField, MsgRead, RoundMode, RunOptions, RunReport, Snapshot, StopReason};
use crate::error::{Error, Result};
use crate::game::AggregativeGame;
use crate::network::CommNetwork;
use crate::numeric::{CompVec, Compensated};
use crate::profile::Profile;
use crate::trace::TradesCRow;

/// Numerical floor for the dual-nonnegativity invariant.
pub const LAMBDA_FLOOR: f64 = -1e-12;

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Config(format!(
            "penalty parameter rho must be positive, got {rho}"
        )));
    }
    Ok(())
}

/// Penalty value Σ_ℓ H_ℓ(a_ℓ, λ_ℓ) with
/// H_ℓ = a_ℓ λ_ℓ + (ρ/2) a_ℓ²  when ρ a_ℓ + λ_ℓ ≥ 0, and −λ_ℓ²/(2ρ) otherwise.
pub fn h_penalty(a: &DVector<f64>, lambda: &DVector<f64>, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    if a.len() != lambda.len() {
        return Err(Error::dim_global("penalty arguments", a.len(), lambda.len()));
    }
    Ok(a.iter()
        .zip(lambda.iter())
        .map(|(&al, &ll)| {
            if rho * al + ll >= 0.0 {
                al * ll + 0.5 * rho * al * al
            } else {
                -ll * ll / (2.0 * rho)
            }
        })
        .sum())
}

/// Both partial gradients of [`h_penalty`]: component ℓ of the first is
/// max{ρa_ℓ + λ_ℓ, 0}, of the second (1/ρ)(max{ρa_ℓ + λ_ℓ, 0} − λ_ℓ).
pub fn grad_h(
    a: &DVector<f64>,
    lambda: &DVector<f64>,
    rho: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_rho(rho)?;
    if a.len() != lambda.len() {
        return Err(Error::dim_global("penalty arguments", a.len(), lambda.len()));
    }
    let ga = DVector::from_fn(a.len(), |l, _| (rho * a[l] + lambda[l]).max(0.0));
    let gl = DVector::from_fn(a.len(), |l, _| (ga[l] - lambda[l]) / rho);
    Ok((ga, gl))
}

/// Primal penalty direction A_iᵀ max{ρ s1 + s2, 0}, evaluated at the agent's
/// constraint estimate s1 and own multiplier s2.
pub fn g_x(
    a_block: &nalgebra::DMatrix<f64>,
    s1: &DVector<f64>,
    s2: &DVector<f64>,
    rho: f64,
) -> Result<DVector<f64>> {
    check_rho(rho)?;
    if a_block.nrows() != s1.len() || s1.len() != s2.len() {
        return Err(Error::dim_global(
            "penalty operator rows",
            a_block.nrows(),
            s1.len().max(s2.len()),
        ));
    }
    let m = DVector::from_fn(s1.len(), |l, _| (rho * s1[l] + s2[l]).max(0.0));
    Ok(a_block.transpose() * m)
}

/// Dual penalty direction (1/ρ)(max{ρ s1 + s2, 0} − s2).
pub fn g_lambda(s1: &DVector<f64>, s2: &DVector<f64>, rho: f64) -> Result<DVector<f64>> {
    check_rho(rho)?;
    if s1.len() != s2.len() {
        return Err(Error::dim_global("penalty operator rows", s1.len(), s2.len()));
    }
    Ok(DVector::from_fn(s1.len(), |l, _| {
        ((rho * s1[l] + s2[l]).max(0.0) - s2[l]) / rho
    }))
}

/// Centralized augmented primal–dual iteration on the full constraint value
/// c(x) = Σ_i (A_i x_i − b_i):
///
/// ```text
/// x⁺ = x − δ (F(x) + Aᵀ max{ρ c(x) + λ, 0})
/// λ⁺ = λ + δ (1/ρ)(max{ρ c(x) + λ, 0} − λ)
/// ```
///
/// Its fixed points are exactly the KKT pairs of the coupled game.
pub fn centralized_pd_step(
    game: &AggregativeGame,
    x: &Profile,
    lambda: &DVector<f64>,
    delta: f64,
    rho: f64,
) -> Result<(Profile, DVector<f64>)> {
    check_rho(rho)?;
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Config(format!(
            "step size delta must be positive, got {delta}"
        )));
    }
    let m = game.coupling_rows();
    if m == 0 {
        return Err(Error::Config(
            "centralized primal-dual step needs coupling constraints".into(),
        ));
    }
    if lambda.len() != m {
        return Err(Error::dim_global("multiplier length", m, lambda.len()));
    }
    let c = game.coupling_residual(x)?;
    let mmax = DVector::from_fn(m, |l, _| (rho * c[l] + lambda[l]).max(0.0));
    let f = game.pseudo_gradient(x);
    let mut x_next = x.clone();
    for i in 0..game.n_agents() {
        let a = &game.agent(i).coupling.as_ref().unwrap().a;
        let xi = x.block_owned(i) - (f.block_owned(i) + a.transpose() * &mmax) * delta;
        x_next.set_block(i, &xi);
    }
    let lambda_next = lambda + (&mmax - lambda) * (delta / rho);
    Ok((x_next, lambda_next))
}

#[derive(Clone, Copy, Debug)]
pub struct TradesCParams {
    /// Step size δ > 0 (also bounded by the safeguard w_ii > δ/ρ).
    pub delta: f64,
    /// Penalty parameter ρ > 0.
    pub rho: f64,
}

impl Default for TradesCParams {
    fn default() -> Self {
        TradesCParams {
            delta: 0.05,
            rho: 0.1,
        }
    }
}

impl TradesCParams {
    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!(
                "step size delta must be positive, got {}",
                self.delta
            )));
        }
        check_rho(self.rho)
    }
}

/// Per-round scalar diagnostics returned by [`TradesC::step`].
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    /// ‖x⁺ − x‖ / δ.
    pub step_norm: f64,
    /// Smallest multiplier component after the round.
    pub lambda_min: f64,
}

struct AgentOut {
    x_next: DVector<f64>,
    lambda_next: DVector<f64>,
    z_next: CompVec,
    y_next: CompVec,
    move_sq: f64,
    reads: Vec<MsgRead>,
}

pub struct TradesC<'a> {
    game: &'a AggregativeGame,
    net: &'a CommNetwork,
    params: TradesCParams,
    mode: RoundMode,
    guard: bool,
    check_safeguard: bool,
    x: Profile,
    lambda: Vec<DVector<f64>>,
    z: Vec<CompVec>,
    y: Vec<CompVec>,
    iter: usize,
    reads: Vec<MsgRead>,
}

impl<'a> TradesC<'a> {
    pub fn new(
        game: &'a AggregativeGame,
        net: &'a CommNetwork,
        params: TradesCParams,
        x0: &Profile,
        lambda0: Option<&[DVector<f64>]>,
    ) -> Result<Self> {
        params.validate()?;
        let m = game.coupling_rows();
        if m == 0 {
            return Err(Error::Config(
                "game has no coupling constraints; use the local-constraint engine instead".into(),
            ));
        }
        for i in 0..game.n_agents() {
            if !game.agent(i).local_set.is_free() {
                return Err(Error::Config(format!(
                    "agent {i} has a local constraint set; this engine runs the coupled game \
                     over unconstrained strategies (its x-update has no projection)"
                )));
            }
        }
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
        let w_min = net.min_self_weight();
        if w_min <= params.delta / params.rho {
            return Err(Error::Assumption(format!(
                "dual safeguard requires every self weight to exceed delta/rho = {:.6}, \
                 but the smallest is {:.6}; shrink delta or raise rho",
                params.delta / params.rho,
                w_min
            )));
        }

        let n = game.n_agents();
        let lambda = match lambda0 {
            None => vec![DVector::zeros(m); n],
            Some(ls) => {
                if ls.len() != n {
                    return Err(Error::dim_global("multiplier count", n, ls.len()));
                }
                for (i, l) in ls.iter().enumerate() {
                    if l.len() != m {
                        return Err(Error::dim(i, "multiplier length", m, l.len()));
                    }
                    if l.iter().any(|&v| v < 0.0) {
                        return Err(Error::Config(format!(
                            "agent {i} starts with a negative multiplier component"
                        )));
                    }
                }
                ls.to_vec()
            }
        };
        let d = game.agg_dim();
        Ok(TradesC {
            game,
            net,
            params,
            mode: RoundMode::Sequential,
            guard: false,
            check_safeguard: true,
            x: x0.clone(),
            lambda,
            z: (0..n).map(|_| CompVec::zeros(d)).collect(),
            y: (0..n).map(|_| CompVec::zeros(m)).collect(),
            iter: 0,
            reads: Vec::new(),
        })
    }

    pub fn set_mode(&mut self, mode: RoundMode) {
        self.mode = mode;
    }

    pub fn set_guard(&mut self, on: bool) {
        self.guard = on;
    }

    /// Disable the per-round multiplier floor check (it stays on by default).
    pub fn set_check_safeguard(&mut self, on: bool) {
        self.check_safeguard = on;
    }

    pub fn take_reads(&mut self) -> Vec<MsgRead> {
        std::mem::take(&mut self.reads)
    }

    pub fn params(&self) -> TradesCParams {
        self.params
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn x(&self) -> &Profile {
        &self.x
    }

    pub fn lambda(&self, i: usize) -> &DVector<f64> {
        &self.lambda[i]
    }

    /// Consensus multiplier λ̄ = (1/N) Σ_i λ_i.
    pub fn lambda_mean(&self) -> DVector<f64> {
        crate::numeric::compensated_mean(&self.lambda)
    }

    pub fn z(&self, i: usize) -> DVector<f64> {
        &self.z[i].hi + &self.z[i].lo
    }

    pub fn y(&self, i: usize) -> DVector<f64> {
        &self.y[i].hi + &self.y[i].lo
    }

    #[cfg(test)]
    fn force_lambda(&mut self, i: usize, v: &DVector<f64>) {
        self.lambda[i].copy_from(v);
    }

    /// Scaled local constraint values N(A_i x_i − b_i) for all agents.
    fn scaled_constraints(&self) -> Vec<DVector<f64>> {
        let n = self.game.n_agents() as f64;
        (0..self.game.n_agents())
            .map(|i| {
                self.game
                    .agent(i)
                    .coupling
                    .as_ref()
                    .expect("validated at construction")
                    .residual(&self.x.block_owned(i))
                    * n
            })
            .collect()
    }

    fn compute_agent(
        &self,
        i: usize,
        phis: &[DVector<f64>],
        ncs: &[DVector<f64>],
    ) -> Result<AgentOut> {
        let x_i = self.x.block_owned(i);
        let lam_i = &self.lambda[i];
        let d = self.game.agg_dim();
        let m = self.game.coupling_rows();
        let rho = self.params.rho;
        let delta = self.params.delta;
        let a_block = &self.game.agent(i).coupling.as_ref().unwrap().a;

        let s = &phis[i] + &self.z[i].hi + &self.z[i].lo;
        let s1 = &ncs[i] + &self.y[i].hi + &self.y[i].lo;
        let f = self.game.f_tilde(i, &x_i, &s);
        let mmax = DVector::from_fn(m, |l, _| (rho * s1[l] + lam_i[l]).max(0.0));
        let dir = f + a_block.transpose() * &mmax;
        let move_sq = dir.norm_squared();
        let x_next = &x_i - dir * delta;

        // Mixes over in-neighbors in fixed ascending order; z and y carry
        // compensation so their zero means survive long runs.
        let mut reads = Vec::new();
        let mut lambda_next = DVector::zeros(m);
        let mut z_acc = vec![Compensated::new(0.0); d];
        let mut y_acc = vec![Compensated::new(0.0); m];
        for &(j, w) in self.net.in_neighbors(i) {
            lambda_next.axpy(w, &self.lambda[j], 1.0);
            let zj = &self.z[j];
            let pj = &phis[j];
            for (k, a) in z_acc.iter_mut().enumerate() {
                a.add_prod(w, zj.hi[k]);
                a.add_prod(w, zj.lo[k]);
                a.add_prod(w, pj[k]);
            }
            let yj = &self.y[j];
            let cj = &ncs[j];
            for (l, a) in y_acc.iter_mut().enumerate() {
                a.add_prod(w, yj.hi[l]);
                a.add_prod(w, yj.lo[l]);
                a.add_prod(w, cj[l]);
            }
            if self.guard && j != i {
                for field in [
                    MsgField::Dual,
                    MsgField::Tracker,
                    MsgField::Aggregate,
                    MsgField::ConstraintTracker,
                    MsgField::ConstraintValue,
                ] {
                    reads.push(MsgRead {
                        receiver: i,
                        sender: j,
                        field,
                    });
                }
            }
        }
        for l in 0..m {
            lambda_next[l] += delta * (mmax[l] - lam_i[l]) / rho;
        }
        let mut z_next = CompVec::zeros(d);
        for (k, a) in z_acc.iter_mut().enumerate() {
            a.add(-phis[i][k]);
            z_next.set(k, *a);
        }
        let mut y_next = CompVec::zeros(m);
        for (l, a) in y_acc.iter_mut().enumerate() {
            a.add(-ncs[i][l]);
            y_next.set(l, *a);
        }

        let finite = x_next.iter().all(|v| v.is_finite())
            && lambda_next.iter().all(|v| v.is_finite())
            && z_next.hi.iter().all(|v| v.is_finite())
            && y_next.hi.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Divergence {
                iteration: self.iter,
                quantity: "strategy, multiplier, or tracker update",
                last_finite: Box::new(self.x.clone()),
            });
        }
        if self.check_safeguard {
            let lam_min = lambda_next.min();
            if lam_min < LAMBDA_FLOOR {
                return Err(Error::DualSafeguard {
                    iteration: self.iter,
                    lambda_min: lam_min,
                });
            }
        }
        Ok(AgentOut {
            x_next,
            lambda_next,
            z_next,
            y_next,
            move_sq,
            reads,
        })
    }

    /// One synchronous round; state is untouched if any agent fails.
    pub fn step(&mut self) -> Result<StepInfo> {
        let phis = self.game.phis(&self.x);
        let ncs = self.scaled_constraints();
        let n = self.game.n_agents();
        let outs: Vec<AgentOut> = match self.mode {
            RoundMode::Sequential => (0..n)
                .map(|i| self.compute_agent(i, &phis, &ncs))
                .collect::<Result<_>>()?,
            RoundMode::Parallel => (0..n)
                .into_par_iter()
                .map(|i| self.compute_agent(i, &phis, &ncs))
                .collect::<Result<_>>()?,
        };

        let mut move_sq = 0.0;
        let mut lambda_min = f64::INFINITY;
        for (i, out) in outs.into_iter().enumerate() {
            self.x.set_block(i, &out.x_next);
            lambda_min = lambda_min.min(out.lambda_next.min());
            self.lambda[i] = out.lambda_next;
            self.z[i] = out.z_next;
            self.y[i] = out.y_next;
            move_sq += out.move_sq;
            self.reads.extend(out.reads);
        }
        self.iter += 1;
        Ok(StepInfo {
            step_norm: move_sq.sqrt(),
            lambda_min,
        })
    }

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

    /// ‖(1/N) Σ_i y_i‖∞ — the constraint-tracker mean, zero in exact
    /// arithmetic.
    pub fn y_mean_norm(&self) -> f64 {
        let n = self.game.n_agents();
        let m = self.game.coupling_rows();
        let mut worst: f64 = 0.0;
        for l in 0..m {
            let mut acc = Compensated::new(0.0);
            for y in &self.y {
                acc.add(y.hi[l]);
                acc.add(y.lo[l]);
            }
            worst = worst.max((acc.value() / n as f64).abs());
        }
        worst
    }

    fn trace_row(&self, step_norm: f64, oracle: Option<&Profile>, wall_ns: u64) -> TradesCRow {
        let (tracking_err_max, mean_z_norm) = self.tracking_stats();
        let lambda_bar = self.lambda_mean();
        let c = self
            .game
            .coupling_residual(&self.x)
            .expect("validated at construction");
        let m = self.game.coupling_rows();
        let rho = self.params.rho;

        let cons_violation_inf = c.iter().fold(0.0f64, |acc, &v| acc.max(v.max(0.0)));
        let dual_consensus_err = self
            .lambda
            .iter()
            .map(|l| (l - &lambda_bar).norm_squared())
            .sum::<f64>()
            .sqrt();
        let mmax = DVector::from_fn(m, |l, _| (rho * c[l] + lambda_bar[l]).max(0.0));
        let f = self.game.pseudo_gradient(&self.x);
        let mut primal_sq = 0.0;
        for i in 0..self.game.n_agents() {
            let a = &self.game.agent(i).coupling.as_ref().unwrap().a;
            primal_sq += (f.block_owned(i) + a.transpose() * &mmax).norm_squared();
        }
        let kkt_dual_res = ((&mmax - &lambda_bar) / rho).norm();
        let lambda_min = self
            .lambda
            .iter()
            .map(|l| l.min())
            .fold(f64::INFINITY, f64::min);

        TradesCRow {
            iter: self.iter as u64,
            err_to_oracle: oracle.map(|o| self.x.distance(o)),
            step_norm,
            tracking_err_max,
            mean_z_norm,
            mean_y_norm: self.y_mean_norm(),
            cons_violation_inf,
            dual_consensus_err,
            kkt_primal_res: primal_sq.sqrt(),
            kkt_dual_res,
            lambda_min,
            wall_ns,
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            iter: self.iter,
            x: self.x.clone(),
            z: (0..self.z.len()).map(|i| self.z(i)).collect(),
            lambda: self.lambda.clone(),
            y: (0..self.y.len()).map(|i| self.y(i)).collect(),
        }
    }

    /// Run rounds until ‖x⁺ − x‖/δ drops below `tol` or the budget runs out.
    pub fn run(&mut self, opts: &RunOptions) -> Result<RunReport<TradesCRow>> {
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
