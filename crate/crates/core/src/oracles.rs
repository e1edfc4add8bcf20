//! Ground-truth solvers and estimators used to judge the distributed
//! engines: centralized equilibrium solvers with KKT certification, an exact
//! curvature oracle for games with affine pseudo-gradients, convergence-rate
//! fitting, and the slow/fast diagnostic energies.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::engine::Snapshot;
use crate::error::{Error, Result};
use crate::game::AggregativeGame;
use crate::numeric::compensated_mean;
use crate::profile::Profile;
use crate::trades::reduced_step;
use crate::trades_c::centralized_pd_step;

/// Relative floor under which the stacked constraint matrix counts as
/// row-rank deficient.
const RANK_TOL: f64 = 1e-10;

/// KKT residuals of a primal–dual pair for the coupled game.  All four
/// fields are nonnegative; the pair is certified at tolerance `tol` when
/// every field is ≤ `tol`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct KktReport {
    /// ‖F(x) + Aᵀ max{ρ c(x) + λ, 0}‖.
    pub primal_res: f64,
    /// ‖(1/ρ)(max{ρ c(x) + λ, 0} − λ)‖.
    pub dual_res: f64,
    /// ‖max(0, c(x))‖∞.
    pub cons_violation: f64,
    /// |λᵀ max(0, −c(x))| — multipliers paired with positive slack.
    pub complementarity: f64,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.primal_res
            .max(self.dual_res)
            .max(self.cons_violation)
            .max(self.complementarity)
    }

    pub fn certified(&self, tol: f64) -> bool {
        self.max_residual() <= tol
    }
}

/// Evaluate the four KKT residuals at (x, λ).  λ may carry negative entries;
/// the report is still computed and the caller decides policy.
pub fn kkt_residual(
    game: &AggregativeGame,
    x: &Profile,
    lambda: &DVector<f64>,
    rho: f64,
) -> Result<KktReport> {
    let m = game.coupling_rows();
    if m == 0 {
        return Err(Error::Config(
            "KKT residuals need a game with coupling constraints".into(),
        ));
    }
    if lambda.len() != m {
        return Err(Error::dim_global("multiplier length", m, lambda.len()));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Config(format!(
            "penalty parameter rho must be positive, got {rho}"
        )));
    }
    let c = game.coupling_residual(x)?;
    let mmax = DVector::from_fn(m, |l, _| (rho * c[l] + lambda[l]).max(0.0));
    let f = game.pseudo_gradient(x);
    let mut primal_sq = 0.0;
    for i in 0..game.n_agents() {
        let a = &game.agent(i).coupling.as_ref().unwrap().a;
        primal_sq += (f.block_owned(i) + a.transpose() * &mmax).norm_squared();
    }
    let dual_res = ((&mmax - lambda) / rho).norm();
    let cons_violation = c.iter().fold(0.0f64, |acc, &v| acc.max(v.max(0.0)));
    let complementarity = lambda
        .iter()
        .zip(c.iter())
        .map(|(&l, &cv)| l * (-cv).max(0.0))
        .sum::<f64>()
        .abs();
    Ok(KktReport {
        primal_res: primal_sq.sqrt(),
        dual_res,
        cons_violation,
        complementarity,
    })
}

/// Equilibrium of a game with local constraints only, via the projected
/// pseudo-gradient fixed point: iterate x ← P_X[x − γF(x)] until the
/// fixed-point residual ‖x − P_X[x − γF(x)]‖ drops below `tol`.
pub fn solve_ne(
    game: &AggregativeGame,
    gamma: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Profile> {
    if game.coupling_rows() > 0 {
        return Err(Error::Config(
            "this solver handles local constraints only; the coupled game has its own".into(),
        ));
    }
    if !(tol > 0.0) || max_iters == 0 {
        return Err(Error::Config(
            "solver needs a positive tolerance and a positive iteration budget".into(),
        ));
    }
    let mut x = game.project_profile(&Profile::zeros(game.layout().clone()))?;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iters {
        let next = reduced_step(game, None, &x, 1.0, gamma)?;
        if !next.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                quantity: "projected pseudo-gradient iterate",
                last_finite: Box::new(x),
            });
        }
        residual = next.distance(&x);
        x = next;
        if residual <= tol {
            return Ok(x);
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        residual,
    })
}

/// The stacked constraint matrix [A_1 … A_N] of the coupled game.
fn stacked_constraint_matrix(game: &AggregativeGame) -> DMatrix<f64> {
    let m = game.coupling_rows();
    let n = game.layout().total_dim();
    let mut a = DMatrix::zeros(m, n);
    for i in 0..game.n_agents() {
        let block = &game.agent(i).coupling.as_ref().unwrap().a;
        a.view_mut((0, game.layout().range(i).start), (m, block.ncols()))
            .copy_from(block);
    }
    a
}

/// Equilibrium and multiplier of the coupled game via the centralized
/// augmented primal–dual iteration, run until all four KKT residuals are
/// ≤ `tol`.  The stacked constraint matrix must have full row rank.
pub fn solve_vgne(
    game: &AggregativeGame,
    delta: f64,
    rho: f64,
    tol: f64,
    max_iters: usize,
    x0: Option<&Profile>,
    lambda0: Option<&DVector<f64>>,
) -> Result<(Profile, DVector<f64>, KktReport)> {
    let m = game.coupling_rows();
    if m == 0 {
        return Err(Error::Config(
            "the game has no coupling constraints; use the plain equilibrium solver".into(),
        ));
    }
    if !(tol > 0.0) || max_iters == 0 {
        return Err(Error::Config(
            "solver needs a positive tolerance and a positive iteration budget".into(),
        ));
    }
    let a = stacked_constraint_matrix(game);
    // An m×n matrix has min(m, n) singular values, so full row rank needs
    // m <= n before the smallest one means anything.
    if a.nrows() > a.ncols() {
        return Err(Error::Assumption(format!(
            "{} constraint rows exceed the {} strategy dimensions; \
             the stacked matrix cannot have full row rank",
            a.nrows(),
            a.ncols()
        )));
    }
    let svals = a.svd(false, false).singular_values;
    let smax = svals.max();
    let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smin > RANK_TOL * smax.max(1.0)) {
        return Err(Error::Assumption(format!(
            "stacked constraint matrix is row-rank deficient \
             (smallest singular value {smin:.3e} vs largest {smax:.3e})"
        )));
    }

    let mut x = match x0 {
        Some(p) => {
            if p.layout() != game.layout() {
                return Err(Error::dim_global(
                    "start profile length",
                    game.layout().total_dim(),
                    p.total_dim(),
                ));
            }
            p.clone()
        }
        None => Profile::zeros(game.layout().clone()),
    };
    let mut lambda = match lambda0 {
        Some(l) => {
            if l.len() != m {
                return Err(Error::dim_global("multiplier length", m, l.len()));
            }
            if l.iter().any(|&v| v < 0.0) {
                return Err(Error::Config(
                    "start multiplier has a negative component".into(),
                ));
            }
            l.clone()
        }
        None => DVector::zeros(m),
    };

    let mut worst = f64::INFINITY;
    for it in 1..=max_iters {
        let (xn, ln) = centralized_pd_step(game, &x, &lambda, delta, rho)?;
        if !(xn.is_finite() && ln.iter().all(|v| v.is_finite())) {
            return Err(Error::Divergence {
                iteration: it,
                quantity: "centralized primal-dual iterate",
                last_finite: Box::new(x),
            });
        }
        x = xn;
        lambda = ln;
        let report = kkt_residual(game, &x, &lambda, rho)?;
        worst = report.max_residual();
        if report.certified(tol) {
            return Ok((x, lambda, report));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        residual: worst,
    })
}

/// Exact linear model (M, q) with F(x) = Mx + q, recovered by probing the
/// pseudo-gradient at the origin and at unit vectors.  Errors when a probe
/// point reveals the pseudo-gradient is not affine.
pub fn affine_pseudo_gradient(game: &AggregativeGame) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = game.layout().total_dim();
    let zero = Profile::zeros(game.layout().clone());
    let q = game.pseudo_gradient(&zero).as_vector().clone_owned();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = zero.clone();
        e.as_vector_mut()[j] = 1.0;
        let col = game.pseudo_gradient(&e).as_vector() - &q;
        m.set_column(j, &col);
    }
    let probe = DVector::from_fn(n, |k, _| 0.5 + 0.3 * ((k as f64) * 0.7).sin());
    let fp = game
        .pseudo_gradient(&Profile::from_flat(game.layout().clone(), probe.clone())?)
        .as_vector()
        .clone_owned();
    let predicted = &m * &probe + &q;
    let err = (&fp - &predicted).norm();
    if err > 1e-8 * (1.0 + fp.norm()) {
        return Err(Error::Config(format!(
            "pseudo-gradient is not affine (probe mismatch {err:.3e}); \
             the exact curvature oracle only covers quadratic games"
        )));
    }
    Ok((m, q))
}

/// Exact strong-monotonicity and Lipschitz constants (μ, L) of an affine
/// pseudo-gradient: the smallest eigenvalue of the symmetric part and the
/// largest singular value of M.
pub fn quadratic_curvature(game: &AggregativeGame) -> Result<(f64, f64)> {
    let (m, _) = affine_pseudo_gradient(game)?;
    let sym = (&m + m.transpose()) * 0.5;
    let mu = sym
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let l = m.svd(false, false).singular_values.max();
    Ok((mu, l))
}

/// Contraction factor of the gradient map x ↦ x − γF(x) on a μ-strongly
/// monotone, L-Lipschitz pseudo-gradient: √(1 − γ(2μ − γL²)), valid for
/// γ ∈ (0, 2μ/L²).
pub fn gradient_map_contraction(mu: f64, l: f64, gamma: f64) -> Result<f64> {
    if !(mu > 0.0 && l >= mu) {
        return Err(Error::Config(format!(
            "contraction bound needs 0 < mu <= L, got mu = {mu}, L = {l}"
        )));
    }
    if !(gamma > 0.0 && gamma < 2.0 * mu / (l * l)) {
        return Err(Error::Config(format!(
            "gamma = {gamma} outside the contraction range (0, {})",
            2.0 * mu / (l * l)
        )));
    }
    Ok((1.0 - gamma * (2.0 * mu - gamma * l * l)).sqrt())
}

/// Fitted convergence rate of a positive error series.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RateFit {
    /// Worst per-step ratio e_{t+1}/e_t over the window.
    pub r: f64,
    /// Slope of the least-squares line through log e_t.
    pub log_slope: f64,
    /// Multiplicative intercept of that line (value at the window start).
    pub a1: f64,
    /// Fitted index range [start, end) in the original series.
    pub window: (usize, usize),
    /// Root-mean-square residual of the log fit.
    pub residual: f64,
    /// Geometric-decay verdict: worst ratio below one and no upward ratio
    /// drift across the window (which rules out sublinear series whose
    /// finite-window ratios also stay below one).
    pub q_linear: bool,
}

/// Fit a decay rate to `errors[burn_in..]`, truncating at the first exact
/// zero.  Needs at least three positive points.
pub fn fit_qlinear_rate(errors: &[f64], burn_in: usize) -> Result<RateFit> {
    if burn_in >= errors.len() {
        return Err(Error::Config(format!(
            "burn-in {burn_in} swallows the whole series of length {}",
            errors.len()
        )));
    }
    let tail = &errors[burn_in..];
    let cut = tail.iter().position(|&v| v == 0.0).unwrap_or(tail.len());
    let window = &tail[..cut];
    if window.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config(
            "error series must be finite and nonnegative".into(),
        ));
    }
    if window.len() < 3 {
        return Err(Error::Config(format!(
            "rate fit needs at least 3 positive points after burn-in, got {}",
            window.len()
        )));
    }

    let ratios: Vec<f64> = window.windows(2).map(|p| p[1] / p[0]).collect();
    let r = ratios.iter().cloned().fold(0.0f64, f64::max);

    // Least squares of log e against the window index.
    let n = window.len() as f64;
    let logs: Vec<f64> = window.iter().map(|v| v.ln()).collect();
    let t_mean = (window.len() as f64 - 1.0) / 2.0;
    let y_mean = logs.iter().sum::<f64>() / n;
    let mut stt = 0.0;
    let mut sty = 0.0;
    for (t, y) in logs.iter().enumerate() {
        let dt = t as f64 - t_mean;
        stt += dt * dt;
        sty += dt * (y - y_mean);
    }
    let slope = sty / stt;
    let intercept = y_mean - slope * t_mean;
    let residual = (logs
        .iter()
        .enumerate()
        .map(|(t, y)| {
            let p = intercept + slope * t as f64;
            (y - p) * (y - p)
        })
        .sum::<f64>()
        / n)
        .sqrt();

    // A sublinear series like 1/t also keeps finite-window ratios below one,
    // but its ratios creep upward; geometric decay holds them flat.
    let half = ratios.len() / 2;
    let head = ratios[..half].iter().cloned().fold(0.0f64, f64::max);
    let drift_ok = if ratios.len() < 4 {
        true
    } else {
        let tail_max = ratios[half..].iter().cloned().fold(0.0f64, f64::max);
        tail_max <= head + 0.5 * (1.0 - r).max(0.0)
    };
    Ok(RateFit {
        r,
        log_slope: slope,
        a1: intercept.exp(),
        window: (burn_in, burn_in + window.len()),
        residual,
        q_linear: r < 1.0 && drift_ok,
    })
}

/// Fast-subsystem energies at one recorded round.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SpRecord {
    pub iter: usize,
    /// Σ_i ‖z_i + φ_i(x_i) − σ(x)‖² — distance of the aggregate trackers
    /// from their consensus target.
    pub z_energy: f64,
    /// Σ_i ‖y_i + N c_i(x_i) − c(x)‖² for engines with constraint trackers.
    pub y_energy: Option<f64>,
    /// ‖λ − 1λ̄‖ for engines with multipliers.
    pub dual_consensus: Option<f64>,
}

/// Compute the fast-state energies along a snapshot sequence.  Everything is
/// evaluated in consensus coordinates, so no orthonormal-complement basis is
/// ever materialized.
pub fn sp_diagnostics(game: &AggregativeGame, snapshots: &[Snapshot]) -> Result<Vec<SpRecord>> {
    let mut out = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        if snap.z.len() != game.n_agents() {
            return Err(Error::Config(
                "snapshots do not carry full tracker states; re-run with snapshots enabled".into(),
            ));
        }
        let phis = game.phis(&snap.x);
        let sigma = game.sigma(&snap.x);
        let z_energy = (0..game.n_agents())
            .map(|i| (&snap.z[i] + &phis[i] - &sigma).norm_squared())
            .sum();

        let y_energy = if snap.y.is_empty() {
            None
        } else {
            let c_total = game.coupling_residual(&snap.x)?;
            let n = game.n_agents() as f64;
            let mut e = 0.0;
            for i in 0..game.n_agents() {
                let ci = game
                    .agent(i)
                    .coupling
                    .as_ref()
                    .expect("y-trackers imply coupling blocks")
                    .residual(&snap.x.block_owned(i));
                e += (&snap.y[i] + ci * n - &c_total).norm_squared();
            }
            Some(e)
        };
        let dual_consensus = if snap.lambda.is_empty() {
            None
        } else {
            let bar = compensated_mean(&snap.lambda);
            Some(
                snap.lambda
                    .iter()
                    .map(|l| (l - &bar).norm_squared())
                    .sum::<f64>()
                    .sqrt(),
            )
        };
        out.push(SpRecord {
            iter: snap.iter,
            z_energy,
            y_energy,
            dual_consensus,
        });
    }
    Ok(out)
}
