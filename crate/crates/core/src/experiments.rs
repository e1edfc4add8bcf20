//! Config-driven Monte Carlo benchmark harness.
//!
//! A JSON [`ExperimentConfig`] names a case (two built-in randomized case
//! studies, or a fully explicit custom game), an algorithm, and run
//! parameters.  [`run_monte_carlo`] draws one instance per trial from
//! per-trial RNG streams, solves each instance with the matching centralized
//! reference solver, runs the distributed algorithm against that reference,
//! writes one trace CSV per trial, and assembles a JSON summary with
//! mean/std error curves, per-trial rate fits, and iterate timing.  A
//! generated Python script renders the curves from the CSVs alone.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{RoundMode, RunOptions, StopReason};
use crate::error::{Error, Result};
use crate::game::{
    AgentSpec, AggregativeGame, CouplingBlock, DemandResponseCost, DeviationTrackingCost,
    GameSpec, ProbeRegion,
};
use crate::network::{build_erdos_renyi, build_ring, CommNetwork, NetworkSpec};
use crate::numeric::comp_sum;
use crate::oracles::{
    fit_qlinear_rate, quadratic_curvature, solve_ne, solve_vgne, KktReport, RateFit,
};
use crate::profile::Profile;
use crate::projection::{demand_response_set_with, DykstraParams, LoadModel};
use crate::trace::{config_sha256, write_trial_csv, TraceRow};
use crate::trades::{Trades, TradesParams};
use crate::trades_c::{TradesC, TradesCParams};

/// Accepted violation when double-checking a generated start point against
/// its feasible set (the projector itself works to a tighter tolerance).
const FEASIBILITY_TOL: f64 = 1e-6;

/// Relative floor on the smallest singular value of the stacked constraint
/// matrix below which a draw counts as rank deficient.
const RANK_REDRAW_TOL: f64 = 1e-8;

fn default_trials() -> usize {
    25
}

fn default_max_iters() -> usize {
    10_000
}

fn default_true() -> bool {
    true
}

/// Top-level run description, loadable from JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub case: CaseSpec,
    pub algorithm: AlgorithmSpec,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Master seed; trial k draws from stream k of this seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Early-stop threshold on ‖x⁺ − x‖/δ; omit to run exactly `max_iters`.
    #[serde(default)]
    pub tol: Option<f64>,
    /// Record which neighbor fields each agent reads (diagnostic; slows runs).
    #[serde(default)]
    pub guard_locality: bool,
    /// Per-round multiplier floor check in the constrained algorithm.
    #[serde(default = "default_true")]
    pub check_safeguard: bool,
    /// Worker threads for the trial pool; omit for the rayon default.
    #[serde(default)]
    pub threads: Option<usize>,
    /// Compute each round's agent updates in parallel instead of in index
    /// order (the committed states are identical either way).
    #[serde(default)]
    pub parallel_rounds: bool,
    /// Record full state snapshots every k rounds.
    #[serde(default)]
    pub snapshot_every: Option<usize>,
    #[serde(default)]
    pub oracle: OracleConfig,
    /// Burn-in for the per-trial rate fit; omit for one fifth of the series.
    #[serde(default)]
    pub rate_burn_in: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cheap structural checks that need no instance generation.
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("need at least one trial".into()));
        }
        match (&self.case, &self.algorithm) {
            (CaseSpec::DemandResponse(_), AlgorithmSpec::TradesC { .. }) => {
                return Err(Error::Config(
                    "the demand-response case has local constraints only; \
                     run it with algorithm \"trades\""
                        .into(),
                ));
            }
            (CaseSpec::Coupling(_), AlgorithmSpec::Trades { .. }) => {
                return Err(Error::Config(
                    "the coupling case carries shared affine constraints; \
                     run it with algorithm \"trades_c\""
                        .into(),
                ));
            }
            (CaseSpec::Custom(c), AlgorithmSpec::Trades { .. }) if c.lambda0.is_some() => {
                return Err(Error::Config(
                    "start multipliers were given but algorithm \"trades\" has no dual variable"
                        .into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }

    /// Canonical digest of the whole configuration (object key order does
    /// not matter); stamped into every CSV this config produces.
    pub fn digest(&self) -> Result<String> {
        Ok(config_sha256(&serde_json::to_value(self)?))
    }
}

/// Which instance family each trial draws from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum CaseSpec {
    DemandResponse(DemandResponseCase),
    Coupling(CouplingCase),
    Custom(CustomCase),
}

impl CaseSpec {
    pub fn label(&self) -> &'static str {
        match self {
            CaseSpec::DemandResponse(_) => "demand_response",
            CaseSpec::Coupling(_) => "coupling",
            CaseSpec::Custom(_) => "custom",
        }
    }
}

/// Randomized fleet of flexible loads scheduling energy over a horizon,
/// coupled through a price that moves with average consumption.  All draw
/// supports are plain uniform intervals and can be overridden.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandResponseCase {
    pub agents: usize,
    pub horizon: usize,
    /// Edge probability of the random communication graph.
    pub edge_probability: f64,
    /// Per-slot consumption box 𝒰 (also the preferred-schedule support).
    pub u_bounds: (f64, f64),
    /// Storage-state box 𝒮 (also the initial-state support).
    pub s_bounds: (f64, f64),
    /// Comfort weight ρᵢ support.
    pub rho_range: (f64, f64),
    /// Price sensitivity λ support (one draw shared by all agents).
    pub lambda_range: (f64, f64),
    /// Base price p₀ component support.
    pub p0_range: (f64, f64),
    /// Storage decay aᵢ support.
    pub a_range: (f64, f64),
    /// Charge efficiency bᵢ support.
    pub b_range: (f64, f64),
    /// Redraws allowed per agent before giving up on a feasible schedule.
    pub max_redraws: usize,
    /// Sweep tolerance of the per-agent set projector; omit for the module
    /// default.
    pub dykstra_tol: Option<f64>,
    /// Sweep budget of the per-agent set projector; omit for the module
    /// default.
    pub dykstra_max_sweeps: Option<usize>,
}

impl Default for DemandResponseCase {
    fn default() -> Self {
        DemandResponseCase {
            agents: 10,
            horizon: 24,
            edge_probability: 0.3,
            u_bounds: (0.0, 1.0),
            s_bounds: (0.0, 10.0),
            rho_range: (0.5, 1.5),
            lambda_range: (0.5, 1.5),
            p0_range: (0.0, 1.0),
            a_range: (0.9, 1.0),
            b_range: (0.5, 1.5),
            max_redraws: 32,
            dykstra_tol: None,
            dykstra_max_sweeps: None,
        }
    }
}

/// Randomized target-tracking agents splitting shared affine resource
/// constraints, talking over a ring.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingCase {
    pub agents: usize,
    /// Per-agent strategy dimension.
    pub dim: usize,
    /// Shared constraint rows m.
    pub constraints: usize,
    /// Ring self weight (must exceed δ/ρ for the dual safeguard).
    pub self_weight: f64,
    /// Target point pᵢ component support.
    pub target_range: (f64, f64),
    /// Constraint budget bᵢ component support.
    pub b_range: (f64, f64),
    /// Redraws allowed for a full-row-rank stacked constraint matrix.
    pub max_redraws: usize,
}

impl Default for CouplingCase {
    fn default() -> Self {
        CouplingCase {
            agents: 20,
            dim: 2,
            constraints: 3,
            self_weight: 0.6,
            target_range: (0.0, 100.0),
            b_range: (0.0, 100.0),
            max_redraws: 32,
        }
    }
}

/// Fully explicit game and network; trials differ only through the start
/// point (and the graph draw, for seedless random topologies).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomCase {
    pub game: GameSpec,
    pub network: NetworkSpec,
    /// Fixed start profile, one row per agent; omitted, each trial draws one
    /// uniformly from [-1, 1] per component.
    #[serde(default)]
    pub x0: Option<Vec<Vec<f64>>>,
    /// Fixed start multipliers for the constrained algorithm, one row per
    /// agent; omitted, multipliers start at zero.
    #[serde(default)]
    pub lambda0: Option<Vec<Vec<f64>>>,
}

fn default_trades_delta() -> f64 {
    TradesParams::default().delta
}

fn default_trades_gamma() -> f64 {
    TradesParams::default().gamma
}

fn default_trades_c_delta() -> f64 {
    TradesCParams::default().delta
}

fn default_trades_c_rho() -> f64 {
    TradesCParams::default().rho
}

/// Which distributed algorithm runs each trial.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum AlgorithmSpec {
    Trades {
        #[serde(default = "default_trades_delta")]
        delta: f64,
        #[serde(default = "default_trades_gamma")]
        gamma: f64,
    },
    TradesC {
        #[serde(default = "default_trades_c_delta")]
        delta: f64,
        #[serde(default = "default_trades_c_rho")]
        rho: f64,
    },
}

impl AlgorithmSpec {
    pub fn label(&self) -> &'static str {
        match self {
            AlgorithmSpec::Trades { .. } => "trades",
            AlgorithmSpec::TradesC { .. } => "trades_c",
        }
    }
}

/// Parameters of the per-trial centralized reference solve.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Fixed-point / KKT tolerance of the reference solve.
    pub tol: f64,
    pub max_iters: usize,
    /// Gradient step for the local-constraint reference solve; omitted, a
    /// safe value is derived from the measured curvature when the
    /// pseudo-gradient is affine, falling back to the run's γ.
    pub gamma: Option<f64>,
    /// Overrides for the coupled reference solve; omitted, the run's δ and ρ
    /// are reused.
    pub delta: Option<f64>,
    pub rho: Option<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            tol: 1e-9,
            max_iters: 2_000_000,
            gamma: None,
            delta: None,
            rho: None,
        }
    }
}

/// Independent RNG stream for one trial of a master seed.
fn trial_rng(seed: u64, trial: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn unif(rng: &mut ChaCha12Rng, range: (f64, f64), what: &str) -> Result<f64> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Config(format!(
            "{what} support [{lo}, {hi}] is not a valid interval"
        )));
    }
    Ok(lo + (hi - lo) * rng.gen::<f64>())
}

fn unif_vec(rng: &mut ChaCha12Rng, len: usize, range: (f64, f64), what: &str) -> Result<DVector<f64>> {
    let mut v = Vec::with_capacity(len);
    for _ in 0..len {
        v.push(unif(rng, range, what)?);
    }
    Ok(DVector::from_vec(v))
}

/// Draw one demand-response instance: per-agent comfort weights, preferred
/// schedules, storage dynamics, and feasible sets; a shared price model; a
/// random connected communication graph.  Each agent redraws its own
/// parameters until its schedule set is demonstrably nonempty (probed by
/// projecting the preferred schedule into it); the start point is that
/// projection.
pub fn gen_demand_response(
    case: &DemandResponseCase,
    seed: u64,
    trial: u64,
) -> Result<(AggregativeGame, CommNetwork, Profile)> {
    if case.agents < 2 {
        return Err(Error::Config("demand-response case needs at least 2 agents".into()));
    }
    if case.horizon == 0 {
        return Err(Error::Config("demand-response case needs a nonzero horizon".into()));
    }
    let t = case.horizon;
    let mut rng = trial_rng(seed, trial);
    let graph_seed = rng.next_u64();
    let lambda = unif(&mut rng, case.lambda_range, "price sensitivity")?;
    let p0 = unif_vec(&mut rng, t, case.p0_range, "base price")?;

    let mut specs = Vec::with_capacity(case.agents);
    let mut starts = Vec::with_capacity(case.agents);
    for i in 0..case.agents {
        let mut drawn = None;
        for _ in 0..=case.max_redraws {
            let rho = unif(&mut rng, case.rho_range, "comfort weight")?;
            let u_hat = unif_vec(&mut rng, t, case.u_bounds, "preferred schedule")?;
            let a = unif(&mut rng, case.a_range, "storage decay")?;
            let b = unif(&mut rng, case.b_range, "charge efficiency")?;
            let s1 = unif(&mut rng, case.s_bounds, "initial storage state")?;
            let model = LoadModel {
                a,
                b,
                s1,
                horizon: t,
                u_bounds: case.u_bounds,
                s_bounds: case.s_bounds,
            };
            let budget = comp_sum(u_hat.iter().copied());
            let defaults = DykstraParams::default();
            let params = DykstraParams {
                tol: case.dykstra_tol.unwrap_or(defaults.tol),
                max_sweeps: case.dykstra_max_sweeps.unwrap_or(defaults.max_sweeps),
            };
            let set = match demand_response_set_with(&model, budget, params) {
                Ok(s) => s,
                Err(Error::Config(_)) => continue,
                Err(e) => return Err(e),
            };
            let start = match set.project(&u_hat) {
                Ok(p) => p,
                Err(Error::InfeasibleProjection { .. }) => continue,
                Err(e) => return Err(e),
            };
            if set.violation(&start) > FEASIBILITY_TOL {
                continue;
            }
            let cost = DemandResponseCost::new(rho, u_hat, lambda, p0.clone())?;
            drawn = Some((AgentSpec::new(Box::new(cost), set, None)?, start));
            break;
        }
        match drawn {
            Some((spec, start)) => {
                specs.push(spec);
                starts.push(start);
            }
            None => {
                return Err(Error::Assumption(format!(
                    "agent {i}: no feasible schedule draw in {} attempts; \
                     widen the storage bounds or shrink the consumption box",
                    case.max_redraws + 1
                )));
            }
        }
    }
    let game = AggregativeGame::new(specs)?;
    let net = build_erdos_renyi(case.agents, case.edge_probability, graph_seed)?;
    let x0 = Profile::from_blocks(&starts);
    Ok((game, net, x0))
}

/// Draw one coupled instance: target-tracking costs with a shared aggregate
/// weight, uniform constraint blocks redrawn until the stacked matrix has
/// full row rank, and a ring network.  Strategies start at the origin and
/// multipliers at zero.
pub fn gen_coupling(
    case: &CouplingCase,
    seed: u64,
    trial: u64,
) -> Result<(AggregativeGame, CommNetwork, Profile, Vec<DVector<f64>>)> {
    let (n, d, m) = (case.agents, case.dim, case.constraints);
    if n < 2 {
        return Err(Error::Config("coupling case needs at least 2 agents".into()));
    }
    if d == 0 || m == 0 {
        return Err(Error::Config(
            "coupling case needs nonzero strategy and constraint dimensions".into(),
        ));
    }
    if m > n * d {
        return Err(Error::Config(format!(
            "{m} shared constraint rows exceed the {} total strategy dimensions, \
             so the stacked constraint matrix cannot have full row rank",
            n * d
        )));
    }
    let mut rng = trial_rng(seed, trial);
    let w = unif(&mut rng, (0.0, 1.0), "aggregate weight")?;
    let mut targets = Vec::with_capacity(n);
    let mut budgets = Vec::with_capacity(n);
    for _ in 0..n {
        targets.push(unif_vec(&mut rng, d, case.target_range, "target point")?);
        budgets.push(unif_vec(&mut rng, m, case.b_range, "constraint budget")?);
    }

    let mut blocks = None;
    for _ in 0..=case.max_redraws {
        let draw: Vec<DMatrix<f64>> = (0..n)
            .map(|_| DMatrix::from_fn(m, d, |_, _| 2.0 * rng.gen::<f64>() - 1.0))
            .collect();
        let mut stacked = DMatrix::zeros(m, n * d);
        for (i, a) in draw.iter().enumerate() {
            stacked.view_mut((0, i * d), (m, d)).copy_from(a);
        }
        let svals = stacked.svd(false, false).singular_values;
        let smax = svals.max();
        let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
        if smin > RANK_REDRAW_TOL * smax.max(1.0) {
            blocks = Some(draw);
            break;
        }
    }
    let blocks = blocks.ok_or_else(|| {
        Error::Assumption(format!(
            "no full-row-rank constraint draw in {} attempts",
            case.max_redraws + 1
        ))
    })?;

    let specs = targets
        .into_iter()
        .zip(blocks.into_iter().zip(budgets))
        .map(|(p, (a, b))| {
            let cost = DeviationTrackingCost::new(p, w)?;
            let coupling = CouplingBlock::new(a, b)?;
            AgentSpec::new(Box::new(cost), crate::projection::ProjectionOperator::free(d), Some(coupling))
        })
        .collect::<Result<Vec<_>>>()?;
    let game = AggregativeGame::new(specs)?;
    let net = build_ring(n, case.self_weight)?;
    let x0 = Profile::zeros(game.layout().clone());
    let lambda0 = vec![DVector::zeros(m); n];
    Ok((game, net, x0, lambda0))
}

fn profile_from_rows(game: &AggregativeGame, rows: &[Vec<f64>]) -> Result<Profile> {
    if rows.len() != game.n_agents() {
        return Err(Error::dim_global("start profile rows", game.n_agents(), rows.len()));
    }
    let blocks: Vec<DVector<f64>> = rows.iter().map(|r| DVector::from_vec(r.clone())).collect();
    let p = Profile::from_blocks(&blocks);
    if p.layout() != game.layout() {
        return Err(Error::dim_global(
            "start profile length",
            game.layout().total_dim(),
            p.total_dim(),
        ));
    }
    Ok(p)
}

/// Build the explicit game/network of a custom case; the start point comes
/// from the config or, absent one, from a per-trial uniform draw.
pub fn gen_custom(
    case: &CustomCase,
    seed: u64,
    trial: u64,
) -> Result<(AggregativeGame, CommNetwork, Profile, Option<Vec<DVector<f64>>>)> {
    let game = case.game.build()?;
    let mut rng = trial_rng(seed, trial);
    let graph_seed = rng.next_u64();
    let net = case.network.build(graph_seed)?;
    let x0 = match &case.x0 {
        Some(rows) => profile_from_rows(&game, rows)?,
        None => {
            let mut p = Profile::zeros(game.layout().clone());
            for k in 0..p.total_dim() {
                p.as_vector_mut()[k] = 2.0 * rng.gen::<f64>() - 1.0;
            }
            p
        }
    };
    let lambda0 = match &case.lambda0 {
        Some(rows) => Some(rows.iter().map(|r| DVector::from_row_slice(r)).collect()),
        None => None,
    };
    Ok((game, net, x0, lambda0))
}

/// Safe reference-solve step derived from exact curvature, when available.
fn derived_gamma(game: &AggregativeGame) -> Option<f64> {
    let (mu, l) = quadratic_curvature(game).ok()?;
    if mu > 0.0 && l > 0.0 {
        Some(mu / (l * l))
    } else {
        None
    }
}

/// Draw the instance one trial runs on, dispatching on the case.
pub fn gen_instance(
    cfg: &ExperimentConfig,
    trial: u64,
) -> Result<(AggregativeGame, CommNetwork, Profile, Option<Vec<DVector<f64>>>)> {
    match &cfg.case {
        CaseSpec::DemandResponse(c) => {
            let (g, n, x) = gen_demand_response(c, cfg.seed, trial)?;
            Ok((g, n, x, None))
        }
        CaseSpec::Coupling(c) => {
            let (g, n, x, l) = gen_coupling(c, cfg.seed, trial)?;
            Ok((g, n, x, Some(l)))
        }
        CaseSpec::Custom(c) => gen_custom(c, cfg.seed, trial),
    }
}

/// Centralized reference solve matching the configured algorithm: the
/// equilibrium alone for the local-constraint case, the equilibrium,
/// aggregate multiplier, and its KKT certificate for the coupled case.
pub fn solve_reference(
    cfg: &ExperimentConfig,
    game: &AggregativeGame,
) -> Result<(Profile, Option<(DVector<f64>, KktReport)>)> {
    match cfg.algorithm {
        AlgorithmSpec::Trades { gamma, .. } => {
            let oracle_gamma = cfg
                .oracle
                .gamma
                .or_else(|| derived_gamma(game))
                .unwrap_or(gamma);
            let x = solve_ne(game, oracle_gamma, cfg.oracle.tol, cfg.oracle.max_iters)?;
            Ok((x, None))
        }
        AlgorithmSpec::TradesC { delta, rho } => {
            let od = cfg.oracle.delta.unwrap_or(delta);
            let orho = cfg.oracle.rho.unwrap_or(rho);
            let (x, l, kkt) =
                solve_vgne(game, od, orho, cfg.oracle.tol, cfg.oracle.max_iters, None, None)?;
            Ok((x, Some((l, kkt))))
        }
    }
}

/// What one finished (non-failed) trial contributes to the summary.
struct TrialDone {
    iterations: usize,
    converged: bool,
    /// Normalized error per recorded round, starting at round 0.
    normalized: Vec<f64>,
    /// Per-iteration wall time, rounds 1.. (round 0 performs no work).
    wall_ns: Vec<f64>,
    csv_name: String,
    oracle_kkt: Option<KktReport>,
    warnings: Vec<String>,
}

enum TrialOutcome {
    Done(Box<TrialDone>),
    Failed { message: String },
}

/// Errors that mark one trial as failed instead of aborting the whole run.
fn is_trial_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Divergence { .. } | Error::DualSafeguard { .. } | Error::NoConvergence { .. }
    )
}

fn soft(e: Error) -> Result<TrialOutcome> {
    if is_trial_failure(&e) {
        Ok(TrialOutcome::Failed {
            message: e.to_string(),
        })
    } else {
        Err(e)
    }
}

fn run_options(cfg: &ExperimentConfig, oracle: Profile) -> RunOptions {
    let mut opts = RunOptions::default()
        .with_max_iters(cfg.max_iters)
        .with_tol(cfg.tol)
        .with_oracle(oracle);
    if let Some(k) = cfg.snapshot_every {
        opts = opts.with_snapshots(k);
    }
    opts
}

fn reference_norm(x_star: &Profile) -> Result<f64> {
    let n = x_star.norm();
    if n > 0.0 {
        Ok(n)
    } else {
        Err(Error::Config(
            "the reference equilibrium is the origin, so the normalized error \
             is undefined; shift the game"
                .into(),
        ))
    }
}

fn collect_done<R: TraceRow>(
    rows: &[R],
    oracle_norm: f64,
    iterations: usize,
    converged: bool,
    csv_name: String,
    oracle_kkt: Option<KktReport>,
    warnings: Vec<String>,
) -> TrialDone {
    let normalized: Vec<f64> = rows
        .iter()
        .map(|r| r.err_to_oracle().map(|e| e / oracle_norm).unwrap_or(f64::NAN))
        .collect();
    let wall_ns: Vec<f64> = rows.iter().skip(1).map(|r| r.cells().last().expect("wall column").parse::<f64>().unwrap_or(f64::NAN)).collect();
    TrialDone {
        iterations,
        converged,
        normalized,
        wall_ns,
        csv_name,
        oracle_kkt,
        warnings,
    }
}

fn run_trial(
    cfg: &ExperimentConfig,
    digest: &str,
    out_dir: &Path,
    trial: usize,
) -> Result<TrialOutcome> {
    let csv_name = format!("trial_{trial:03}.csv");
    let csv_path = out_dir.join(&csv_name);
    let (game, net, x0, lambda0) = gen_instance(cfg, trial as u64)?;
    match cfg.algorithm {
        AlgorithmSpec::Trades { delta, gamma } => {
            let mut eng = Trades::new(&game, &net, TradesParams { delta, gamma }, &x0)?;
            if cfg.parallel_rounds {
                eng.set_mode(RoundMode::Parallel);
            }
            eng.set_guard(cfg.guard_locality);
            let warnings = eng.warnings().to_vec();

            let (x_star, _) = match solve_reference(cfg, &game) {
                Ok(r) => r,
                Err(e) => return soft(e),
            };
            let oracle_norm = reference_norm(&x_star)?;

            let opts = run_options(cfg, x_star);
            let report = match eng.run(&opts) {
                Ok(r) => r,
                Err(e) => return soft(e),
            };
            write_trial_csv(&csv_path, digest, trial as u64, Some(oracle_norm), &report.rows)?;
            Ok(TrialOutcome::Done(Box::new(collect_done(
                &report.rows,
                oracle_norm,
                report.iterations,
                report.stop == StopReason::Converged,
                csv_name,
                None,
                warnings,
            ))))
        }
        AlgorithmSpec::TradesC { delta, rho } => {
            let mut eng = TradesC::new(
                &game,
                &net,
                TradesCParams { delta, rho },
                &x0,
                lambda0.as_deref(),
            )?;
            if cfg.parallel_rounds {
                eng.set_mode(RoundMode::Parallel);
            }
            eng.set_guard(cfg.guard_locality);
            eng.set_check_safeguard(cfg.check_safeguard);

            let (x_star, dual) = match solve_reference(cfg, &game) {
                Ok(r) => r,
                Err(e) => return soft(e),
            };
            let kkt = dual.map(|(_, k)| k);
            let oracle_norm = reference_norm(&x_star)?;

            let opts = run_options(cfg, x_star);
            let report = match eng.run(&opts) {
                Ok(r) => r,
                Err(e) => return soft(e),
            };
            write_trial_csv(&csv_path, digest, trial as u64, Some(oracle_norm), &report.rows)?;
            Ok(TrialOutcome::Done(Box::new(collect_done(
                &report.rows,
                oracle_norm,
                report.iterations,
                report.stop == StopReason::Converged,
                csv_name,
                kkt,
                Vec::new(),
            ))))
        }
    }
}

/// Value of a (possibly shorter) curve at index t, held at its last value.
fn value_at(c: &[f64], t: usize) -> f64 {
    if c.is_empty() {
        f64::NAN
    } else if t < c.len() {
        c[t]
    } else {
        c[c.len() - 1]
    }
}

/// Per-iteration mean and sample standard deviation across trials; shorter
/// trials are extended by their final value so every iteration averages the
/// same number of trials.
fn curve_stats(curves: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let grid = curves.iter().map(|c| c.len()).max().unwrap_or(0);
    let n = curves.len();
    let mut mean = Vec::with_capacity(grid);
    let mut std = Vec::with_capacity(grid);
    for t in 0..grid {
        let m = comp_sum(curves.iter().map(|c| value_at(c, t))) / n as f64;
        let s = if n > 1 {
            (comp_sum(curves.iter().map(|c| {
                let d = value_at(c, t) - m;
                d * d
            })) / (n as f64 - 1.0))
                .sqrt()
        } else {
            0.0
        };
        mean.push(m);
        std.push(s);
    }
    (mean, std)
}

fn median(vals: &mut [f64]) -> Option<f64> {
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite timing values"));
    let n = vals.len();
    Some(if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    })
}

/// Per-trial iterate time with the first iterations dropped as warmup.
fn trial_wall_median(wall_ns: &[f64]) -> Option<f64> {
    let warmup = (wall_ns.len() / 5).min(5);
    let mut kept: Vec<f64> = wall_ns[warmup..].to_vec();
    median(&mut kept)
}

/// One line of the summary per trial.
#[derive(Clone, Debug, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    /// "converged", "max_iters", or "failed: <reason>".
    pub outcome: String,
    pub iterations: usize,
    pub final_normalized_err: Option<f64>,
    pub rate: Option<RateFit>,
    /// Median per-iteration wall time after warmup, nanoseconds.
    pub wall_ns_per_iter: Option<f64>,
    /// KKT residuals of the reference pair (coupled runs only).
    pub oracle_kkt: Option<KktReport>,
    pub csv: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Iterate-time aggregation across trials (medians of per-trial medians).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct WallSummary {
    pub median_ns: f64,
    pub mean_ns: f64,
    pub std_ns: f64,
}

pub const SUMMARY_SCHEMA: &str = "nashtrack-summary-v1";

/// Cross-trial result of one Monte Carlo run, also written as
/// `summary.json` next to the trial CSVs.
#[derive(Clone, Debug, Serialize)]
pub struct MonteCarloSummary {
    pub schema: String,
    pub config_sha256: String,
    pub case: String,
    pub algorithm: String,
    pub trials: usize,
    pub completed: usize,
    pub failed: usize,
    /// Per-iteration mean of the normalized error over completed trials
    /// (shorter trials held at their final value).
    pub mean_normalized_err: Vec<f64>,
    /// Matching sample standard deviation (zero with a single trial).
    pub std_normalized_err: Vec<f64>,
    pub final_mean_normalized_err: Option<f64>,
    pub wall_ns_per_iter: Option<WallSummary>,
    pub trial_records: Vec<TrialRecord>,
    /// Name of the generated plot script, relative to the output directory.
    pub plot_script: Option<String>,
}

/// Run every trial of `cfg`, writing per-trial CSVs, `summary.json`, and a
/// plot script into `out_dir`.  Failed trials (divergence, safeguard stop,
/// reference solver giving up) are recorded and skipped by the statistics;
/// the run only errors on configuration-class problems.
pub fn run_monte_carlo(cfg: &ExperimentConfig, out_dir: &Path) -> Result<MonteCarloSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let digest = cfg.digest()?;

    let run_all = || -> Result<Vec<TrialOutcome>> {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, &digest, out_dir, t))
            .collect()
    };
    let outcomes = match cfg.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            pool.install(run_all)?
        }
        None => run_all()?,
    };

    let mut records = Vec::with_capacity(outcomes.len());
    let mut curves: Vec<&[f64]> = Vec::new();
    let mut wall_medians = Vec::new();
    for (t, outcome) in outcomes.iter().enumerate() {
        match outcome {
            TrialOutcome::Done(d) => {
                curves.push(&d.normalized);
                let burn_in = cfg.rate_burn_in.unwrap_or(d.normalized.len() / 5);
                let rate = fit_qlinear_rate(&d.normalized, burn_in).ok();
                let wall = trial_wall_median(&d.wall_ns);
                if let Some(w) = wall {
                    wall_medians.push(w);
                }
                records.push(TrialRecord {
                    trial: t,
                    outcome: if d.converged { "converged" } else { "max_iters" }.into(),
                    iterations: d.iterations,
                    final_normalized_err: d.normalized.last().copied(),
                    rate,
                    wall_ns_per_iter: wall,
                    oracle_kkt: d.oracle_kkt,
                    csv: Some(d.csv_name.clone()),
                    warnings: d.warnings.clone(),
                });
            }
            TrialOutcome::Failed { message } => {
                records.push(TrialRecord {
                    trial: t,
                    outcome: format!("failed: {message}"),
                    iterations: 0,
                    final_normalized_err: None,
                    rate: None,
                    wall_ns_per_iter: None,
                    oracle_kkt: None,
                    csv: None,
                    warnings: Vec::new(),
                });
            }
        }
    }

    let (mean, std) = curve_stats(&curves);
    let wall = if wall_medians.is_empty() {
        None
    } else {
        let n = wall_medians.len() as f64;
        let m = comp_sum(wall_medians.iter().copied()) / n;
        let s = if wall_medians.len() > 1 {
            (comp_sum(wall_medians.iter().map(|v| (v - m) * (v - m))) / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(WallSummary {
            median_ns: median(&mut wall_medians.clone()).expect("nonempty"),
            mean_ns: m,
            std_ns: s,
        })
    };

    let csvs: Vec<String> = records.iter().filter_map(|r| r.csv.clone()).collect();
    let plot_script = if csvs.is_empty() && records.iter().all(|r| r.csv.is_none()) {
        // Still emit the script so the directory is self-describing.
        emit_plot_script(out_dir, &[])?;
        Some("plot.py".to_string())
    } else {
        emit_plot_script(
            out_dir,
            &[PlotSeries {
                label: cfg.algorithm.label().to_string(),
                csv_files: csvs,
            }],
        )?;
        Some("plot.py".to_string())
    };

    let summary = MonteCarloSummary {
        schema: SUMMARY_SCHEMA.into(),
        config_sha256: digest,
        case: cfg.case.label().into(),
        algorithm: cfg.algorithm.label().into(),
        trials: cfg.trials,
        completed: curves.len(),
        failed: cfg.trials - curves.len(),
        final_mean_normalized_err: mean.last().copied(),
        mean_normalized_err: mean,
        std_normalized_err: std,
        wall_ns_per_iter: wall,
        trial_records: records,
        plot_script,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(out_dir.join("summary.json"), json)?;
    Ok(summary)
}

/// One labeled bundle of trace CSVs for the plot script.
#[derive(Clone, Debug)]
pub struct PlotSeries {
    pub label: String,
    /// File names relative to the script's directory.
    pub csv_files: Vec<String>,
}

/// Write a self-contained Python script into `dir` that reads only the
/// listed trace CSVs and renders mean ± 1-std normalized-error bands on
/// semilog axes.  Every listed file must already exist.
pub fn emit_plot_script(dir: &Path, series: &[PlotSeries]) -> Result<PathBuf> {
    for s in series {
        for f in &s.csv_files {
            if !dir.join(f).is_file() {
                return Err(Error::Config(format!(
                    "plot series {:?} lists a missing trace file {f}",
                    s.label
                )));
            }
        }
    }
    let empty = series.iter().all(|s| s.csv_files.is_empty());
    let mut py = String::new();
    py.push_str("#!/usr/bin/env python3\n");
    py.push_str(
        "\"\"\"Mean +/- 1-std band of the normalized error across trial traces.\n\n\
         Reads only the CSV files listed below (relative to this script) and\n\
         writes plot.png next to them.\n\"\"\"\n",
    );
    if empty {
        py.push_str("# WARNING: no trial traces were available when this script was generated;\n");
        py.push_str("# it will render an empty plot.\n");
    }
    py.push_str("import csv\nimport math\nimport os\n\n");
    py.push_str("import matplotlib\nmatplotlib.use(\"Agg\")\nimport matplotlib.pyplot as plt\n\n");
    py.push_str("HERE = os.path.dirname(os.path.abspath(__file__))\n\n");
    py.push_str("SERIES = [\n");
    for s in series {
        py.push_str(&format!("    ({:?}, [", s.label));
        for (k, f) in s.csv_files.iter().enumerate() {
            if k > 0 {
                py.push_str(", ");
            }
            py.push_str(&format!("{f:?}"));
        }
        py.push_str("]),\n");
    }
    py.push_str("]\n\n");
    py.push_str(
        "def read_curve(path):\n\
         \x20   errs = []\n\
         \x20   idx = None\n\
         \x20   with open(path) as fh:\n\
         \x20       for row in csv.reader(fh):\n\
         \x20           if not row or row[0].startswith(\"#\"):\n\
         \x20               continue\n\
         \x20           if row[0] == \"trial\":\n\
         \x20               idx = row.index(\"normalized_err\")\n\
         \x20               continue\n\
         \x20           cell = row[idx]\n\
         \x20           if cell == \"\":\n\
         \x20               return []\n\
         \x20           errs.append(float(cell))\n\
         \x20   return errs\n\n",
    );
    py.push_str(
        "fig, ax = plt.subplots()\n\
         plotted = False\n\
         for label, files in SERIES:\n\
         \x20   curves = [read_curve(os.path.join(HERE, f)) for f in files]\n\
         \x20   curves = [c for c in curves if c]\n\
         \x20   if not curves:\n\
         \x20       continue\n\
         \x20   grid = max(len(c) for c in curves)\n\
         \x20   data = [c + [c[-1]] * (grid - len(c)) for c in curves]\n\
         \x20   cols = list(zip(*data))\n\
         \x20   mean = [sum(col) / len(col) for col in cols]\n\
         \x20   if len(data) > 1:\n\
         \x20       std = [math.sqrt(sum((v - m) ** 2 for v in col) / (len(col) - 1))\n\
         \x20              for col, m in zip(cols, mean)]\n\
         \x20   else:\n\
         \x20       std = [0.0] * grid\n\
         \x20   ts = list(range(grid))\n\
         \x20   ax.semilogy(ts, mean, label=label)\n\
         \x20   lo = [max(m - s, 1e-300) for m, s in zip(mean, std)]\n\
         \x20   hi = [m + s for m, s in zip(mean, std)]\n\
         \x20   ax.fill_between(ts, lo, hi, alpha=0.3)\n\
         \x20   plotted = True\n\n\
         ax.set_xlabel(\"iteration\")\n\
         ax.set_ylabel(\"normalized error\")\n\
         ax.grid(True, which=\"both\", alpha=0.3)\n\
         if plotted:\n\
         \x20   ax.legend()\n\
         out = os.path.join(HERE, \"plot.png\")\n\
         fig.savefig(out, dpi=150, bbox_inches=\"tight\")\n\
         print(\"wrote\", out)\n",
    );
    let path = dir.join("plot.py");
    fs::write(&path, py)?;
    Ok(path)
}

/// Build the first trial's instance and engine, run every assumption check
/// without stepping, and return human-readable findings.
pub fn validate_only(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let mut lines = Vec::new();
    let (game, net, x0, lambda0) = gen_instance(cfg, 0)?;
    match cfg.algorithm {
        AlgorithmSpec::Trades { delta, gamma } => {
            let report = net.validate().into_result()?;
            lines.push(format!(
                "{} agents, {} strategy dims, aggregate dim {}",
                game.n_agents(),
                game.layout().total_dim(),
                game.agg_dim()
            ));
            lines.push(format!(
                "network: contraction factor {:.6}, min self weight {:.6}",
                report.contraction_factor, report.min_self_weight
            ));
            let eng = Trades::new(&game, &net, TradesParams { delta, gamma }, &x0)?;
            if let Ok(est) = game.estimate_monotonicity(&ProbeRegion::around(&x0, 1.0), 32, cfg.seed)
            {
                lines.push(format!(
                    "probed curvature: mu {:.6}, L {:.6}, safe gamma below {:.6}",
                    est.mu_hat,
                    est.l_hat,
                    est.gamma_upper()
                ));
            }
            for w in eng.warnings() {
                lines.push(format!("warning: {w}"));
            }
        }
        AlgorithmSpec::TradesC { delta, rho } => {
            let report = net.validate().into_result()?;
            lines.push(format!(
                "{} agents, {} strategy dims, {} shared constraint rows",
                game.n_agents(),
                game.layout().total_dim(),
                game.coupling_rows()
            ));
            lines.push(format!(
                "network: contraction factor {:.6}, min self weight {:.6} \
                 (dual safeguard needs > delta/rho = {:.6})",
                report.contraction_factor,
                report.min_self_weight,
                delta / rho
            ));
            let _ = TradesC::new(&game, &net, TradesCParams { delta, rho }, &x0, lambda0.as_deref())?;
        }
    }
    lines.push("all assumption checks passed".into());
    Ok(lines)
}
