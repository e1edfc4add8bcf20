//! Aggregative game model.
//!
//! N agents each pick x_i in R^{n_i}; agent i's cost J_i(x_i, σ(x)) couples to
//! the others only through the aggregate σ(x) = (1/N) Σ_j φ_j(x_j).  The
//! pseudo-gradient stacks the partial gradients
//!
//!   F_i(x) = ∇₁J_i(x_i, σ(x)) + (1/N) ∇φ_i(x_i) ∇₂J_i(x_i, σ(x)),
//!
//! where the second term is the chain-rule contribution of x_i to its own
//! aggregate.  The same expression evaluated at an *estimate* s of σ(x) is
//! what the distributed algorithms use, so it is exposed as `f_tilde`.
//!
//! Gradients are caller-supplied and are checked against central finite
//! differences of the cost when the game is assembled; a silent analytic slip
//! in a gradient is the classic way these simulations go quietly wrong.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{comp_sum, compensated_vector_sum};
use crate::profile::{Layout, Profile};
use crate::projection::{demand_response_set, matrix_from_rows, LoadModel, ProjectionOperator};

/// Cost, aggregation rule, and their first-order data for one agent.
///
/// `grad_own` is the gradient in the agent's own strategy with the aggregate
/// held fixed; `grad_agg` is the gradient in the aggregate slot.  The
/// Jacobian of the aggregation rule is stored in gradient layout, i.e.
/// `jac[r, c] = ∂φ_c / ∂x_r` (an n_i × d matrix).
pub trait AgentCost: Send + Sync {
    fn dim(&self) -> usize;
    fn agg_dim(&self) -> usize;
    fn cost(&self, x: &DVector<f64>, s: &DVector<f64>) -> f64;
    fn grad_own(&self, x: &DVector<f64>, s: &DVector<f64>) -> DVector<f64>;
    fn grad_agg(&self, x: &DVector<f64>, s: &DVector<f64>) -> DVector<f64>;
    fn aggregate(&self, x: &DVector<f64>) -> DVector<f64>;
    fn aggregate_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// (∇φ_i) v without materializing the Jacobian; override when φ has
    /// structure (identity, constant matrix, ...).
    fn apply_aggregate_jacobian(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.aggregate_jacobian(x) * v
    }
}

/// Linear coupling-constraint block: this agent contributes A_i x_i - b_i to
/// the shared constraint Σ_i (A_i x_i - b_i) <= 0.
#[derive(Clone, Debug)]
pub struct CouplingBlock {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl CouplingBlock {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::dim_global("coupling offset", a.nrows(), b.len()));
        }
        Ok(CouplingBlock { a, b })
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    /// A_i x_i - b_i.
    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x - &self.b
    }
}

/// One agent: cost model, local feasible set, optional coupling block.
pub struct AgentSpec {
    pub cost: Box<dyn AgentCost>,
    pub local_set: ProjectionOperator,
    pub coupling: Option<CouplingBlock>,
}

impl AgentSpec {
    pub fn new(
        cost: Box<dyn AgentCost>,
        local_set: ProjectionOperator,
        coupling: Option<CouplingBlock>,
    ) -> Result<Self> {
        let n = cost.dim();
        if local_set.dim() != n {
            return Err(Error::dim_global("local set", n, local_set.dim()));
        }
        if let Some(c) = &coupling {
            if c.a.ncols() != n {
                return Err(Error::dim_global("coupling matrix columns", n, c.a.ncols()));
            }
        }
        Ok(AgentSpec {
            cost,
            local_set,
            coupling,
        })
    }

    /// Agent with no local constraint and no coupling block.
    pub fn unconstrained(cost: Box<dyn AgentCost>) -> Self {
        let dim = cost.dim();
        AgentSpec {
            cost,
            local_set: ProjectionOperator::free(dim),
            coupling: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.cost.dim()
    }
}

/// Number of probe points used by the construction-time gradient self-check.
const REGISTRATION_PROBES: usize = 4;
const REGISTRATION_SEED: u64 = 0x5eed_cafe;
/// Relative tolerance for analytic-vs-finite-difference agreement.
const GRADIENT_CHECK_TOL: f64 = 1e-5;

pub struct AggregativeGame {
    agents: Vec<AgentSpec>,
    layout: Layout,
    agg_dim: usize,
    coupling_rows: usize, // 0 when the game has no coupling constraints
}

impl AggregativeGame {
    /// Assemble a game and run the mandatory gradient self-check.
    pub fn new(agents: Vec<AgentSpec>) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::Config("a game needs at least one agent".into()));
        }
        let agg_dim = agents[0].cost.agg_dim();
        for (i, a) in agents.iter().enumerate() {
            if a.cost.agg_dim() != agg_dim {
                return Err(Error::dim(i, "aggregate dimension", agg_dim, a.cost.agg_dim()));
            }
        }
        let with_coupling = agents.iter().filter(|a| a.coupling.is_some()).count();
        let coupling_rows = match with_coupling {
            0 => 0,
            k if k == agents.len() => {
                let m = agents[0].coupling.as_ref().unwrap().rows();
                for (i, a) in agents.iter().enumerate() {
                    let mi = a.coupling.as_ref().unwrap().rows();
                    if mi != m {
                        return Err(Error::dim(i, "coupling rows", m, mi));
                    }
                }
                m
            }
            k => {
                return Err(Error::Config(format!(
                    "coupling blocks must be supplied by every agent or none ({k} of {})",
                    agents.len()
                )));
            }
        };

        let dims: Vec<usize> = agents.iter().map(|a| a.dim()).collect();
        let game = AggregativeGame {
            agents,
            layout: Layout::new(&dims),
            agg_dim,
            coupling_rows,
        };
        game.validate_gradients(REGISTRATION_PROBES, REGISTRATION_SEED)?;
        Ok(game)
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn agg_dim(&self) -> usize {
        self.agg_dim
    }

    /// Rows of the shared coupling constraint (0 = unconstrained game).
    pub fn coupling_rows(&self) -> usize {
        self.coupling_rows
    }

    pub fn agents(&self) -> &[AgentSpec] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &AgentSpec {
        &self.agents[i]
    }

    /// All agents' aggregation values φ_i(x_i).
    pub fn phis(&self, x: &Profile) -> Vec<DVector<f64>> {
        (0..self.n_agents())
            .map(|i| self.agents[i].cost.aggregate(&x.block_owned(i)))
            .collect()
    }

    /// σ(x) = (1/N) Σ_i φ_i(x_i), accumulated in fixed ascending agent order
    /// with compensation, so the value is independent of how callers happen
    /// to enumerate agents.
    pub fn sigma(&self, x: &Profile) -> DVector<f64> {
        let phis = self.phis(x);
        let mut s = compensated_vector_sum(&phis);
        s /= self.n_agents() as f64;
        s
    }

    /// Pseudo-gradient block for agent i at aggregate estimate `s`.
    pub fn f_tilde(&self, i: usize, x_i: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        let cost = &self.agents[i].cost;
        let mut g = cost.grad_own(x_i, s);
        let g_agg = cost.grad_agg(x_i, s);
        g += cost.apply_aggregate_jacobian(x_i, &g_agg) / self.n_agents() as f64;
        g
    }

    /// Full pseudo-gradient F(x) = col(F_i(x)) evaluated at the true σ(x).
    pub fn pseudo_gradient(&self, x: &Profile) -> Profile {
        let s = self.sigma(x);
        let blocks: Vec<DVector<f64>> = (0..self.n_agents())
            .map(|i| self.f_tilde(i, &x.block_owned(i), &s))
            .collect();
        Profile::from_blocks(&blocks)
    }

    /// Shared constraint value c(x) = Σ_i (A_i x_i - b_i); errors when the
    /// game has no coupling blocks.
    pub fn coupling_residual(&self, x: &Profile) -> Result<DVector<f64>> {
        if self.coupling_rows == 0 {
            return Err(Error::Config(
                "coupling residual requested but no coupling constraints are registered".into(),
            ));
        }
        let locals: Vec<DVector<f64>> = (0..self.n_agents())
            .map(|i| {
                self.agents[i]
                    .coupling
                    .as_ref()
                    .unwrap()
                    .residual(&x.block_owned(i))
            })
            .collect();
        Ok(compensated_vector_sum(&locals))
    }

    /// Block-wise projection of a profile onto the local sets.
    pub fn project_profile(&self, x: &Profile) -> Result<Profile> {
        let blocks: Vec<DVector<f64>> = (0..self.n_agents())
            .map(|i| self.agents[i].local_set.project(&x.block_owned(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Profile::from_blocks(&blocks))
    }

    /// Check every agent's analytic first-order data against central finite
    /// differences of its cost and aggregation rule.
    pub fn validate_gradients(&self, probes: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for (i, agent) in self.agents.iter().enumerate() {
            let n = agent.dim();
            let d = self.agg_dim;
            for probe in 0..probes {
                let x = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
                let s = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));

                let check = |quantity: &'static str, max_err: f64| -> Result<()> {
                    if max_err > GRADIENT_CHECK_TOL {
                        Err(Error::GradientCheck {
                            agent: i,
                            quantity,
                            max_err,
                            probe,
                        })
                    } else {
                        Ok(())
                    }
                };

                let g = agent.cost.grad_own(&x, &s);
                if g.len() != n {
                    return Err(Error::dim(i, "grad_own", n, g.len()));
                }
                let fd = fd_grad(n, |xk| agent.cost.cost(xk, &s), &x);
                check("grad_own", rel_err(&g, &fd))?;

                let g = agent.cost.grad_agg(&x, &s);
                if g.len() != d {
                    return Err(Error::dim(i, "grad_agg", d, g.len()));
                }
                let fd = fd_grad(d, |sk| agent.cost.cost(&x, sk), &s);
                check("grad_agg", rel_err(&g, &fd))?;

                let phi = agent.cost.aggregate(&x);
                if phi.len() != d {
                    return Err(Error::dim(i, "aggregate value", d, phi.len()));
                }
                let jac = agent.cost.aggregate_jacobian(&x);
                if (jac.nrows(), jac.ncols()) != (n, d) {
                    return Err(Error::dim(i, "aggregate Jacobian rows", n, jac.nrows()));
                }
                let mut max_err = 0.0f64;
                for r in 0..n {
                    let h = 1e-6 * (1.0 + x[r].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[r] += h;
                    xm[r] -= h;
                    let dphi = (agent.cost.aggregate(&xp) - agent.cost.aggregate(&xm)) / (2.0 * h);
                    for c in 0..d {
                        let scale = 1.0 + jac[(r, c)].abs().max(dphi[c].abs());
                        max_err = max_err.max((jac[(r, c)] - dphi[c]).abs() / scale);
                    }
                }
                check("aggregate_jacobian", max_err)?;

                // the structured Jacobian-vector product must agree with the
                // materialized Jacobian
                let v = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
                let fast = agent.cost.apply_aggregate_jacobian(&x, &v);
                let slow = &jac * &v;
                check("apply_aggregate_jacobian", rel_err(&fast, &slow))?;
            }
        }
        Ok(())
    }

    /// Sample-based bounds on the monotonicity and Lipschitz moduli of the
    /// pseudo-gradient over a box region.  Sampling maxima under-estimate the
    /// true Lipschitz constant and minima over-estimate the true monotonicity
    /// modulus, so treat the result as a probe, not a certificate.
    pub fn estimate_monotonicity(
        &self,
        region: &ProbeRegion,
        pairs: usize,
        seed: u64,
    ) -> Result<MonotonicityEstimate> {
        region.check(self.layout.total_dim())?;
        if pairs == 0 {
            return Err(Error::Config("monotonicity probe needs at least one pair".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut mu = f64::INFINITY;
        let mut lip: f64 = 0.0;
        let mut used = 0;
        while used < pairs {
            let x = region.sample(&mut rng, self.layout.clone());
            let y = region.sample(&mut rng, self.layout.clone());
            let dx = x.as_vector() - y.as_vector();
            let nrm2 = dx.norm_squared();
            if nrm2 < 1e-24 {
                continue; // coincident draw; resample
            }
            let df = self.pseudo_gradient(&x).as_vector() - self.pseudo_gradient(&y).as_vector();
            mu = mu.min(df.dot(&dx) / nrm2);
            lip = lip.max(df.norm() / nrm2.sqrt());
            used += 1;
        }
        Ok(MonotonicityEstimate {
            mu_hat: mu,
            l_hat: lip,
            pairs: used,
        })
    }
}

/// Axis-aligned sampling box over the stacked strategy space.
#[derive(Clone, Debug)]
pub struct ProbeRegion {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl ProbeRegion {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Self {
        ProbeRegion { lo, hi }
    }

    /// Box of half-width `radius` around a profile.
    pub fn around(x: &Profile, radius: f64) -> Self {
        ProbeRegion {
            lo: x.as_vector().map(|v| v - radius),
            hi: x.as_vector().map(|v| v + radius),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.lo.len() != dim || self.hi.len() != dim {
            return Err(Error::dim_global("probe region", dim, self.lo.len()));
        }
        if self.lo.iter().zip(self.hi.iter()).any(|(l, h)| l >= h) {
            return Err(Error::Config(
                "probe region has zero volume (lo >= hi in some component)".into(),
            ));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha12Rng, layout: Layout) -> Profile {
        let data = DVector::from_fn(self.lo.len(), |k, _| rng.gen_range(self.lo[k]..self.hi[k]));
        Profile::from_flat(layout, data).expect("layout matches region")
    }
}

/// Result of a monotonicity/Lipschitz probe.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MonotonicityEstimate {
    /// min over sampled pairs of ⟨F(x)-F(y), x-y⟩ / ‖x-y‖².
    pub mu_hat: f64,
    /// max over sampled pairs of ‖F(x)-F(y)‖ / ‖x-y‖.
    pub l_hat: f64,
    pub pairs: usize,
}

impl MonotonicityEstimate {
    pub fn strongly_monotone(&self) -> bool {
        self.mu_hat > 0.0
    }

    /// Largest projected-gradient step size the contraction argument covers:
    /// γ must stay below 2μ/L²; zero when the probe found no monotonicity.
    pub fn gamma_upper(&self) -> f64 {
        if self.strongly_monotone() && self.l_hat > 0.0 {
            2.0 * self.mu_hat / (self.l_hat * self.l_hat)
        } else {
            0.0
        }
    }
}

fn fd_grad(n: usize, f: impl Fn(&DVector<f64>) -> f64, at: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(n);
    for k in 0..n {
        let h = 1e-6 * (1.0 + at[k].abs());
        let mut p = at.clone();
        let mut m = at.clone();
        p[k] += h;
        m[k] -= h;
        g[k] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / (1.0 + x.abs().max(y.abs())))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Built-in cost families

/// J(x, s) = ½ xᵀQx + qᵀx + xᵀC s with a linear aggregation rule φ(x) = P x.
#[derive(Clone, Debug)]
pub struct QuadraticCost {
    q: DMatrix<f64>,
    lin: DVector<f64>,
    c: DMatrix<f64>,     // n × d
    phi: DMatrix<f64>,   // d × n
    phi_t: DMatrix<f64>, // cached transpose, gradient layout
}

impl QuadraticCost {
    pub fn new(q: DMatrix<f64>, lin: DVector<f64>, c: DMatrix<f64>, phi: DMatrix<f64>) -> Result<Self> {
        let n = q.nrows();
        if q.ncols() != n {
            return Err(Error::dim_global("quadratic term", n, q.ncols()));
        }
        let max_abs = q.amax().max(1.0);
        if (&q - q.transpose()).amax() > 1e-12 * max_abs {
            return Err(Error::Config(
                "quadratic term must be symmetric (symmetrize Q before passing it)".into(),
            ));
        }
        if lin.len() != n {
            return Err(Error::dim_global("linear term", n, lin.len()));
        }
        let d = phi.nrows();
        if phi.ncols() != n {
            return Err(Error::dim_global("aggregation map columns", n, phi.ncols()));
        }
        if c.nrows() != n || c.ncols() != d {
            return Err(Error::dim_global("aggregate coupling term rows", n, c.nrows()));
        }
        let phi_t = phi.transpose();
        Ok(QuadraticCost { q, lin, c, phi, phi_t })
    }

    /// φ = identity (requires the aggregate dimension to equal the agent's).
    pub fn with_identity_phi(q: DMatrix<f64>, lin: DVector<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = q.nrows();
        Self::new(q, lin, c, DMatrix::identity(n, n))
    }
}

impl AgentCost for QuadraticCost {
    fn dim(&self) -> usize {
        self.q.nrows()
    }

    fn agg_dim(&self) -> usize {
        self.phi.nrows()
    }

    fn cost(&self, x: &DVector<f64>, s: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.lin.dot(x) + x.dot(&(&self.c * s))
    }

    fn grad_own(&self, x: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        &self.q * x + &self.lin + &self.c * s
    }

    fn grad_agg(&self, x: &DVector<f64>, _s: &DVector<f64>) -> DVector<f64> {
        self.c.transpose() * x
    }

    fn aggregate(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.phi * x
    }

    fn aggregate_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.phi_t.clone()
    }

    fn apply_aggregate_jacobian(&self, _x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.phi_t * v
    }
}

/// Demand-response cost ρ‖x - û‖² + (λ s + p₀)ᵀ x: quadratic discomfort for
/// deviating from the preferred schedule plus an aggregate-dependent price.
#[derive(Clone, Debug)]
pub struct DemandResponseCost {
    pub rho: f64,
    pub u_hat: DVector<f64>,
    pub lambda: f64,
    pub p0: DVector<f64>,
}

impl DemandResponseCost {
    pub fn new(rho: f64, u_hat: DVector<f64>, lambda: f64, p0: DVector<f64>) -> Result<Self> {
        if p0.len() != u_hat.len() {
            return Err(Error::dim_global("base price vector", u_hat.len(), p0.len()));
        }
        if rho <= 0.0 {
            return Err(Error::Config(format!("discomfort weight must be > 0, got {rho}")));
        }
        Ok(DemandResponseCost { rho, u_hat, lambda, p0 })
    }
}

impl AgentCost for DemandResponseCost {
    fn dim(&self) -> usize {
        self.u_hat.len()
    }

    fn agg_dim(&self) -> usize {
        self.u_hat.len()
    }

    fn cost(&self, x: &DVector<f64>, s: &DVector<f64>) -> f64 {
        let dev = x - &self.u_hat;
        self.rho * dev.norm_squared() + (s * self.lambda + &self.p0).dot(x)
    }

    fn grad_own(&self, x: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        (x - &self.u_hat) * (2.0 * self.rho) + s * self.lambda + &self.p0
    }

    fn grad_agg(&self, x: &DVector<f64>, _s: &DVector<f64>) -> DVector<f64> {
        x * self.lambda
    }

    fn aggregate(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn aggregate_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim())
    }

    fn apply_aggregate_jacobian(&self, _x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }
}

/// ½‖x - p‖² + (w/2)‖x - s‖²: track a preferred point while penalizing
/// deviation from the population aggregate.
#[derive(Clone, Debug)]
pub struct DeviationTrackingCost {
    pub target: DVector<f64>,
    pub w: f64,
}

impl DeviationTrackingCost {
    pub fn new(target: DVector<f64>, w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Config(format!(
                "aggregate-deviation weight must lie in [0, 1], got {w}"
            )));
        }
        Ok(DeviationTrackingCost { target, w })
    }
}

impl AgentCost for DeviationTrackingCost {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn agg_dim(&self) -> usize {
        self.target.len()
    }

    fn cost(&self, x: &DVector<f64>, s: &DVector<f64>) -> f64 {
        0.5 * (x - &self.target).norm_squared() + 0.5 * self.w * (x - s).norm_squared()
    }

    fn grad_own(&self, x: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        (x - &self.target) + (x - s) * self.w
    }

    fn grad_agg(&self, x: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        (x - s) * -self.w
    }

    fn aggregate(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn aggregate_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim())
    }

    fn apply_aggregate_jacobian(&self, _x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }
}

// ---------------------------------------------------------------------------
// JSON game description

/// JSON-loadable game with concrete parameters for a built-in cost family.
/// Costs outside these families are supplied through the [`AgentCost`] trait.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum GameSpec {
    QuadraticAggregative {
        agg_dim: usize,
        agents: Vec<QuadAgentJson>,
    },
    DemandResponse {
        lambda: f64,
        p0: Vec<f64>,
        #[serde(default = "default_u_bounds")]
        u_bounds: (f64, f64),
        #[serde(default = "default_s_bounds")]
        s_bounds: (f64, f64),
        agents: Vec<DemandAgentJson>,
    },
    DeviationTracking {
        w: f64,
        agents: Vec<DeviationAgentJson>,
    },
}

fn default_u_bounds() -> (f64, f64) {
    (0.0, 1.0)
}

fn default_s_bounds() -> (f64, f64) {
    (0.0, 10.0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuadAgentJson {
    pub q: Vec<Vec<f64>>,
    #[serde(default)]
    pub lin: Option<Vec<f64>>,
    /// n × d coupling of own strategy to the aggregate; zero when omitted.
    #[serde(default)]
    pub c_agg: Option<Vec<Vec<f64>>>,
    /// d × n aggregation map; identity when omitted (needs n = d).
    #[serde(default)]
    pub phi: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub local_set: Option<ProjectionOperator>,
    #[serde(default)]
    pub coupling: Option<CouplingJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DemandAgentJson {
    pub rho: f64,
    pub u_hat: Vec<f64>,
    /// Storage dynamics (a, b, s1) behind the local feasible set.
    pub load: (f64, f64, f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeviationAgentJson {
    pub target: Vec<f64>,
    #[serde(default)]
    pub coupling: Option<CouplingJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingJson {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl CouplingJson {
    fn build(&self) -> Result<CouplingBlock> {
        CouplingBlock::new(matrix_from_rows(&self.a, "coupling matrix")?, DVector::from_vec(self.b.clone()))
    }
}

impl GameSpec {
    pub fn build(&self) -> Result<AggregativeGame> {
        match self {
            GameSpec::QuadraticAggregative { agg_dim, agents } => {
                let d = *agg_dim;
                let specs = agents
                    .iter()
                    .map(|a| {
                        let q = matrix_from_rows(&a.q, "quadratic term")?;
                        let n = q.nrows();
                        let lin = match &a.lin {
                            Some(l) => DVector::from_vec(l.clone()),
                            None => DVector::zeros(n),
                        };
                        let c = match &a.c_agg {
                            Some(c) => matrix_from_rows(c, "aggregate coupling term")?,
                            None => DMatrix::zeros(n, d),
                        };
                        let phi = match &a.phi {
                            Some(p) => matrix_from_rows(p, "aggregation map")?,
                            None if n == d => DMatrix::identity(d, n),
                            None => {
                                return Err(Error::Config(
                                    "aggregation map required when agent and aggregate dimensions differ"
                                        .into(),
                                ))
                            }
                        };
                        let cost = QuadraticCost::new(q, lin, c, phi)?;
                        let local = a
                            .local_set
                            .clone()
                            .unwrap_or(ProjectionOperator::free(n));
                        let coupling = a.coupling.as_ref().map(|c| c.build()).transpose()?;
                        AgentSpec::new(Box::new(cost), local, coupling)
                    })
                    .collect::<Result<Vec<_>>>()?;
                AggregativeGame::new(specs)
            }
            GameSpec::DemandResponse {
                lambda,
                p0,
                u_bounds,
                s_bounds,
                agents,
            } => {
                let p0 = DVector::from_vec(p0.clone());
                let specs = agents
                    .iter()
                    .map(|a| {
                        let u_hat = DVector::from_vec(a.u_hat.clone());
                        let budget = comp_sum(u_hat.iter().copied());
                        let (la, lb, s1) = a.load;
                        let model = LoadModel {
                            a: la,
                            b: lb,
                            s1,
                            horizon: u_hat.len(),
                            u_bounds: *u_bounds,
                            s_bounds: *s_bounds,
                        };
                        let local = demand_response_set(&model, budget)?;
                        let cost = DemandResponseCost::new(a.rho, u_hat, *lambda, p0.clone())?;
                        AgentSpec::new(Box::new(cost), local, None)
                    })
                    .collect::<Result<Vec<_>>>()?;
                AggregativeGame::new(specs)
            }
            GameSpec::DeviationTracking { w, agents } => {
                let specs = agents
                    .iter()
                    .map(|a| {
                        let cost = DeviationTrackingCost::new(DVector::from_vec(a.target.clone()), *w)?;
                        let dim = cost.dim();
                        let coupling = a.coupling.as_ref().map(|c| c.build()).transpose()?;
                        AgentSpec::new(Box::new(cost), ProjectionOperator::free(dim), coupling)
                    })
                    .collect::<Result<Vec<_>>>()?;
                AggregativeGame::new(specs)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    /// J_i(x, s) = ½x² + x·s in 1-D with φ = identity.
    fn scalar_coupled_agent() -> AgentSpec {
        let cost = QuadraticCost::with_identity_phi(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        AgentSpec::unconstrained(Box::new(cost))
    }

    fn two_agent_game() -> AggregativeGame {
        AggregativeGame::new(vec![scalar_coupled_agent(), scalar_coupled_agent()]).unwrap()
    }

    #[test]
    fn sigma_averages_aggregates() {
        // φ_i(x) = 2x, three agents at (1, 2, 3): σ = (2 + 4 + 6) / 3 = 4
        let agents: Vec<AgentSpec> = (0..3)
            .map(|_| {
                let cost = QuadraticCost::new(
                    DMatrix::from_element(1, 1, 1.0),
                    DVector::zeros(1),
                    DMatrix::zeros(1, 1),
                    DMatrix::from_element(1, 1, 2.0),
                )
                .unwrap();
                AgentSpec::unconstrained(Box::new(cost))
            })
            .collect();
        let game = AggregativeGame::new(agents).unwrap();
        let x = Profile::from_blocks(&[v(&[1.0]), v(&[2.0]), v(&[3.0])]);
        assert_eq!(game.sigma(&x), v(&[4.0]));
    }

    #[test]
    fn pseudo_gradient_includes_own_aggregate_term() {
        // J_i = ½x_i² + x_i σ, x = (1, 3): σ = 2,
        // F_i = x_i + σ + x_i/N  ->  F = (3.5, 6.5)
        let game = two_agent_game();
        let x = Profile::from_blocks(&[v(&[1.0]), v(&[3.0])]);
        let f = game.pseudo_gradient(&x);
        assert_eq!(f.as_vector().as_slice(), &[3.5, 6.5][..]);
    }

    #[test]
    fn f_tilde_at_supplied_estimate() {
        // same cost, x = 1 evaluated at the (wrong) estimate s = 5:
        // grad_own = 1 + 5, grad_agg = 1, chain term = 1/2 -> 6.5
        let game = two_agent_game();
        assert_eq!(game.f_tilde(0, &v(&[1.0]), &v(&[5.0])), v(&[6.5]));
    }

    #[test]
    fn sigma_is_enumeration_order_insensitive() {
        // permuting (agent, block) pairs jointly leaves σ unchanged: the sum
        // runs in a fixed internal order either way
        let blocks = [v(&[0.125]), v(&[3.75]), v(&[-2.5]), v(&[10.0625]), v(&[0.0009765625])];
        let game_fwd =
            AggregativeGame::new((0..5).map(|_| scalar_coupled_agent()).collect()).unwrap();
        let x_fwd = Profile::from_blocks(&blocks);
        let perm = [4usize, 2, 0, 3, 1];
        let permuted: Vec<DVector<f64>> = perm.iter().map(|&k| blocks[k].clone()).collect();
        let x_perm = Profile::from_blocks(&permuted);
        let s1 = game_fwd.sigma(&x_fwd);
        let s2 = game_fwd.sigma(&x_perm);
        assert_eq!(s1, s2);
    }

    #[test]
    fn coupling_residual_sums_local_blocks() {
        let mk = |b: f64| {
            let mut a = scalar_coupled_agent();
            a.coupling =
                Some(CouplingBlock::new(DMatrix::from_element(1, 1, 1.0), v(&[b])).unwrap());
            a
        };
        let game = AggregativeGame::new(vec![mk(1.0), mk(1.0)]).unwrap();
        let x = Profile::from_blocks(&[v(&[3.0]), v(&[1.0])]);
        assert_eq!(game.coupling_residual(&x).unwrap(), v(&[2.0]));

        let no_coupling = two_agent_game();
        assert!(no_coupling.coupling_residual(&x).is_err());
    }

    #[test]
    fn mixed_coupling_is_rejected() {
        let mut a = scalar_coupled_agent();
        a.coupling = Some(CouplingBlock::new(DMatrix::from_element(1, 1, 1.0), v(&[0.0])).unwrap());
        let b = scalar_coupled_agent();
        assert!(AggregativeGame::new(vec![a, b]).is_err());
    }

    #[test]
    fn gradient_check_catches_analytic_slips() {
        #[derive(Debug)]
        struct OffByOnePercent;
        impl AgentCost for OffByOnePercent {
            fn dim(&self) -> usize {
                1
            }
            fn agg_dim(&self) -> usize {
                1
            }
            fn cost(&self, x: &DVector<f64>, _s: &DVector<f64>) -> f64 {
                0.5 * x[0] * x[0]
            }
            fn grad_own(&self, x: &DVector<f64>, _s: &DVector<f64>) -> DVector<f64> {
                DVector::from_element(1, 1.01 * x[0]) // wrong on purpose
            }
            fn grad_agg(&self, _x: &DVector<f64>, _s: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(1)
            }
            fn aggregate(&self, x: &DVector<f64>) -> DVector<f64> {
                x.clone()
            }
            fn aggregate_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::identity(1, 1)
            }
        }
        let err = match AggregativeGame::new(vec![AgentSpec::unconstrained(Box::new(
            OffByOnePercent,
        ))]) {
            Err(e) => e,
            Ok(_) => panic!("a wrong gradient slipped through registration"),
        };
        match err {
            Error::GradientCheck { agent: 0, quantity: "grad_own", .. } => {}
            other => panic!("expected gradient-check failure, got {other:?}"),
        }
    }

    #[test]
    fn builtin_families_pass_deep_gradient_check() {
        let quad = QuadraticCost::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.5]),
            v(&[0.3, -0.2]),
            DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.0, -0.3, 0.4, 0.2]),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]),
        )
        .unwrap();
        let dr = DemandResponseCost::new(1.2, v(&[0.5, 0.2, 0.8]), 0.9, v(&[0.1, 0.3, 0.2])).unwrap();
        let dev = DeviationTrackingCost::new(v(&[10.0, -3.0, 0.0]), 0.7).unwrap();

        // heterogeneous dims are fine as long as the aggregate dim matches
        let game = AggregativeGame::new(vec![
            AgentSpec::unconstrained(Box::new(quad)),
            AgentSpec::unconstrained(Box::new(dr)),
            AgentSpec::unconstrained(Box::new(dev)),
        ])
        .unwrap();
        game.validate_gradients(100, 99).unwrap();
        assert_eq!(game.layout().total_dim(), 8);
        assert_eq!(game.agg_dim(), 3);
    }

    #[test]
    fn monotonicity_probe_on_linear_maps() {
        // F(x) = 2x: both moduli are exactly 2
        let agents: Vec<AgentSpec> = (0..2)
            .map(|_| {
                let cost = QuadraticCost::with_identity_phi(
                    DMatrix::from_element(1, 1, 2.0),
                    DVector::zeros(1),
                    DMatrix::zeros(1, 1),
                )
                .unwrap();
                AgentSpec::unconstrained(Box::new(cost))
            })
            .collect();
        let game = AggregativeGame::new(agents).unwrap();
        let region = ProbeRegion::new(v(&[-1.0, -1.0]), v(&[1.0, 1.0]));
        let est = game.estimate_monotonicity(&region, 64, 5).unwrap();
        assert!((est.mu_hat - 2.0).abs() < 1e-10);
        assert!((est.l_hat - 2.0).abs() < 1e-10);
        assert!(est.strongly_monotone());
        assert!((est.gamma_upper() - 1.0).abs() < 1e-10);

        // F(x) = -x is flagged
        let agents: Vec<AgentSpec> = (0..2)
            .map(|_| {
                let cost = QuadraticCost::with_identity_phi(
                    DMatrix::from_element(1, 1, -1.0),
                    DVector::zeros(1),
                    DMatrix::zeros(1, 1),
                )
                .unwrap();
                AgentSpec::unconstrained(Box::new(cost))
            })
            .collect();
        let game = AggregativeGame::new(agents).unwrap();
        let est = game.estimate_monotonicity(&region, 32, 5).unwrap();
        assert!(est.mu_hat < 0.0);
        assert!(!est.strongly_monotone());
        assert_eq!(est.gamma_upper(), 0.0);
    }

    #[test]
    fn monotonicity_probe_brackets_spectrum() {
        // symmetric Q with eigenvalues 1 and 3: estimates stay inside [1, 3]
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let cost =
            QuadraticCost::with_identity_phi(q, DVector::zeros(2), DMatrix::zeros(2, 2)).unwrap();
        let game = AggregativeGame::new(vec![AgentSpec::unconstrained(Box::new(cost))]).unwrap();
        let region = ProbeRegion::new(v(&[-2.0, -2.0]), v(&[2.0, 2.0]));
        let est = game.estimate_monotonicity(&region, 200, 11).unwrap();
        assert!(est.mu_hat >= 1.0 - 1e-9 && est.mu_hat <= 3.0 + 1e-9);
        assert!(est.l_hat >= 1.0 - 1e-9 && est.l_hat <= 3.0 + 1e-9);
        assert!(est.mu_hat <= est.l_hat);
    }

    #[test]
    fn degenerate_probe_region_is_rejected() {
        let game = two_agent_game();
        let region = ProbeRegion::new(v(&[0.0, 0.0]), v(&[0.0, 1.0]));
        assert!(game.estimate_monotonicity(&region, 8, 0).is_err());
    }

    #[test]
    fn game_spec_round_trip_and_build() {
        let spec = GameSpec::QuadraticAggregative {
            agg_dim: 1,
            agents: vec![
                QuadAgentJson {
                    q: vec![vec![1.0]],
                    lin: None,
                    c_agg: Some(vec![vec![1.0]]),
                    phi: None,
                    local_set: Some(ProjectionOperator::uniform_box(1, -1.0, 1.0).unwrap()),
                    coupling: None,
                },
                QuadAgentJson {
                    q: vec![vec![1.0]],
                    lin: Some(vec![0.5]),
                    c_agg: Some(vec![vec![1.0]]),
                    phi: None,
                    local_set: None,
                    coupling: None,
                },
            ],
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("quadratic-aggregative"));
        let back: GameSpec = serde_json::from_str(&json).unwrap();
        let game = back.build().unwrap();
        assert_eq!(game.n_agents(), 2);
        assert!(!game.agent(0).local_set.is_free());

        let dr_json = r#"{
            "family": "demand-response",
            "lambda": 1.0,
            "p0": [0.1, 0.2],
            "agents": [
                {"rho": 1.0, "u_hat": [0.5, 0.5], "load": [0.9, 1.0, 1.0]}
            ]
        }"#;
        let spec: GameSpec = serde_json::from_str(dr_json).unwrap();
        let game = spec.build().unwrap();
        assert_eq!(game.agg_dim(), 2);
        assert!(!game.agent(0).local_set.is_free());

        let dev_json = r#"{
            "family": "deviation-tracking",
            "w": 0.5,
            "agents": [
                {"target": [1.0, 2.0], "coupling": {"a": [[1.0, 0.0]], "b": [5.0]}},
                {"target": [3.0, 4.0], "coupling": {"a": [[0.0, 1.0]], "b": [5.0]}}
            ]
        }"#;
        let spec: GameSpec = serde_json::from_str(dev_json).unwrap();
        let game = spec.build().unwrap();
        assert_eq!(game.coupling_rows(), 1);
    }
}
