//! Euclidean projections onto the constraint sets the simulator supports.
//!
//! Every primitive set has a closed-form projector; intersections are handled
//! by Dykstra's cyclic scheme, which converges to the exact projection for
//! convex components (plain alternating projection only finds *a* point in
//! the intersection).  All projectors are nonexpansive and idempotent, which
//! the algorithm layers rely on.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stopping parameters for the cyclic projection sweeps.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DykstraParams {
    /// Sweep-to-sweep iterate change (inf-norm) below which we stop.
    pub tol: f64,
    /// Sweep budget; exhaustion with a non-vanishing change reports the
    /// intersection as infeasible.
    pub max_sweeps: usize,
}

impl Default for DykstraParams {
    fn default() -> Self {
        DykstraParams {
            tol: 1e-10,
            max_sweeps: 10_000,
        }
    }
}

/// Affine-equality set { y : C y = e } with the normal-equation factor cached.
#[derive(Clone, Debug)]
pub struct AffineEquality {
    c: DMatrix<f64>,
    e: DVector<f64>,
    chol: Cholesky<f64, Dyn>, // of C Cᵀ
}

impl AffineEquality {
    pub fn new(c: DMatrix<f64>, e: DVector<f64>) -> Result<Self> {
        if c.nrows() != e.len() {
            return Err(Error::dim_global("equality right-hand side", c.nrows(), e.len()));
        }
        if c.nrows() == 0 {
            return Err(Error::Config("equality set needs at least one row".into()));
        }
        // An explicit rank check: Cholesky alone can squeak through a
        // singular Gram matrix on a rounding-lucky pivot.  More rows than
        // variables can never be independent (and would also hide behind the
        // min(m, n) singular values).
        if c.nrows() > c.ncols() {
            return Err(Error::Config(
                "equality rows are linearly dependent; drop redundant rows".into(),
            ));
        }
        let svals = c.clone().svd(false, false).singular_values;
        let smax = svals.max();
        let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(smin > 1e-10 * smax.max(1.0)) {
            return Err(Error::Config(
                "equality rows are linearly dependent; drop redundant rows".into(),
            ));
        }
        let gram = &c * c.transpose();
        let chol = Cholesky::new(gram).ok_or_else(|| {
            Error::Config("equality rows are linearly dependent; drop redundant rows".into())
        })?;
        Ok(AffineEquality { c, e, chol })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.e
    }

    fn project_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        // x - Cᵀ (C Cᵀ)⁻¹ (C x - e)
        let mut r = &self.c * x;
        r -= &self.e;
        self.chol.solve_mut(&mut r);
        out.copy_from(x);
        out.gemv_tr(-1.0, &self.c, &r, 1.0);
    }
}

/// A closed convex set together with its Euclidean projector.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawOp", into = "RawOp")]
pub enum ProjectionOperator {
    /// All of R^n (identity projector).
    Free { dim: usize },
    /// Axis-aligned box [lo, hi].
    Box { lo: DVector<f64>, hi: DVector<f64> },
    /// { y : y >= 0 }.
    NonnegativeOrthant { dim: usize },
    /// { y : normal · y <= offset }.
    Halfspace { normal: DVector<f64>, offset: f64 },
    /// { y : C y = e }.
    AffineEquality(AffineEquality),
    /// Closed Euclidean ball.
    Ball { center: DVector<f64>, radius: f64 },
    /// Intersection of component sets, projected with Dykstra sweeps.
    Intersection {
        components: Vec<ProjectionOperator>,
        params: DykstraParams,
    },
}

impl ProjectionOperator {
    pub fn free(dim: usize) -> Self {
        ProjectionOperator::Free { dim }
    }

    pub fn box_set(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::dim_global("box upper bound", lo.len(), hi.len()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
            return Err(Error::Config("box has lo > hi in some component".into()));
        }
        Ok(ProjectionOperator::Box { lo, hi })
    }

    pub fn uniform_box(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::box_set(
            DVector::from_element(dim, lo),
            DVector::from_element(dim, hi),
        )
    }

    pub fn nonneg(dim: usize) -> Self {
        ProjectionOperator::NonnegativeOrthant { dim }
    }

    pub fn halfspace(normal: DVector<f64>, offset: f64) -> Result<Self> {
        if normal.norm_squared() == 0.0 {
            return Err(Error::Config(
                "halfspace normal is zero; drop the constraint or fix the data".into(),
            ));
        }
        Ok(ProjectionOperator::Halfspace { normal, offset })
    }

    pub fn affine_equality(c: DMatrix<f64>, e: DVector<f64>) -> Result<Self> {
        Ok(ProjectionOperator::AffineEquality(AffineEquality::new(c, e)?))
    }

    pub fn ball(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !radius.is_finite() || radius < 0.0 {
            return Err(Error::Config(format!("ball radius must be >= 0, got {radius}")));
        }
        Ok(ProjectionOperator::Ball { center, radius })
    }

    pub fn intersection(components: Vec<ProjectionOperator>, params: DykstraParams) -> Result<Self> {
        let mut dims = components.iter().map(|c| c.dim());
        let dim = dims
            .next()
            .ok_or_else(|| Error::Config("intersection needs at least one component".into()))?;
        if let Some(bad) = components.iter().find(|c| c.dim() != dim) {
            return Err(Error::dim_global("intersection component", dim, bad.dim()));
        }
        if !(params.tol > 0.0) || params.max_sweeps == 0 {
            return Err(Error::Config("Dykstra tol must be > 0 and max_sweeps >= 1".into()));
        }
        Ok(ProjectionOperator::Intersection { components, params })
    }

    /// Ambient dimension of the set.
    pub fn dim(&self) -> usize {
        match self {
            ProjectionOperator::Free { dim } => *dim,
            ProjectionOperator::Box { lo, .. } => lo.len(),
            ProjectionOperator::NonnegativeOrthant { dim } => *dim,
            ProjectionOperator::Halfspace { normal, .. } => normal.len(),
            ProjectionOperator::AffineEquality(eq) => eq.c.ncols(),
            ProjectionOperator::Ball { center, .. } => center.len(),
            ProjectionOperator::Intersection { components, .. } => components[0].dim(),
        }
    }

    /// True for the identity projector (no constraint).
    pub fn is_free(&self) -> bool {
        matches!(self, ProjectionOperator::Free { .. })
    }

    /// Project `x` onto the set.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::dim_global("projection input", self.dim(), x.len()));
        }
        let mut out = DVector::zeros(x.len());
        self.project_into(x, &mut out)?;
        Ok(out)
    }

    /// Constraint violation of `x`: zero iff `x` is in the set (up to fp).
    /// Halfspace and ball violations are true distances; box and equality
    /// violations are inf-norm residuals, which bound the distance.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        match self {
            ProjectionOperator::Free { .. } => 0.0,
            ProjectionOperator::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .map(|(v, (l, h))| (l - v).max(v - h).max(0.0))
                .fold(0.0, f64::max),
            ProjectionOperator::NonnegativeOrthant { .. } => {
                x.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max)
            }
            ProjectionOperator::Halfspace { normal, offset } => {
                (normal.dot(x) - offset).max(0.0) / normal.norm()
            }
            ProjectionOperator::AffineEquality(eq) => {
                let r = &eq.c * x - &eq.e;
                r.amax()
            }
            ProjectionOperator::Ball { center, radius } => ((x - center).norm() - radius).max(0.0),
            ProjectionOperator::Intersection { components, .. } => components
                .iter()
                .map(|c| c.violation(x))
                .fold(0.0, f64::max),
        }
    }

    // Writes P(x) into `out` without allocating for the primitive sets; the
    // nested-intersection case allocates (it runs its own sweep loop).
    fn project_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        match self {
            ProjectionOperator::Free { .. } => out.copy_from(x),
            ProjectionOperator::Box { lo, hi } => {
                for k in 0..x.len() {
                    out[k] = x[k].clamp(lo[k], hi[k]);
                }
            }
            ProjectionOperator::NonnegativeOrthant { .. } => {
                for k in 0..x.len() {
                    out[k] = x[k].max(0.0);
                }
            }
            ProjectionOperator::Halfspace { normal, offset } => {
                out.copy_from(x);
                let slack = normal.dot(x) - offset;
                if slack > 0.0 {
                    out.axpy(-slack / normal.norm_squared(), normal, 1.0);
                }
            }
            ProjectionOperator::AffineEquality(eq) => eq.project_into(x, out),
            ProjectionOperator::Ball { center, radius } => {
                out.copy_from(x);
                *out -= center;
                let d = out.norm();
                if d > *radius {
                    // radius = 0 maps everything to the center
                    if d > 0.0 {
                        *out *= radius / d;
                    }
                }
                *out += center;
            }
            ProjectionOperator::Intersection { components, params } => {
                let y = dykstra(components, params, x)?;
                out.copy_from(&y);
            }
        }
        Ok(())
    }
}

/// Per-component correction state for the cyclic sweeps.  A halfspace's
/// correction is always a nonnegative multiple of its normal, and a single
/// equality row's correction lives on the row's span, so both collapse to a
/// scalar; box-like sets keep a full vector but fuse the project/correct
/// update into one componentwise pass.  Everything else runs the generic
/// vector recursion.  The iterates are identical to textbook Dykstra either
/// way — only the storage of the corrections changes.
enum Correction {
    /// correction = alpha * normal with alpha >= 0; (‖normal‖², ‖normal‖∞).
    Ray { alpha: f64, nsq: f64, ninf: f64 },
    /// correction = mu * cᵀ for one equality row c; (‖c‖², ‖c‖∞, rhs).
    Plane {
        mu: f64,
        row: DVector<f64>,
        nsq: f64,
        ninf: f64,
        e: f64,
    },
    /// Componentwise clamp with componentwise correction.
    Clamp { p: DVector<f64> },
    /// General set: correction vector plus the full project call.
    Dense { p: DVector<f64> },
}

/// Dykstra's cyclic projection with per-component correction terms.
fn dykstra(
    components: &[ProjectionOperator],
    params: &DykstraParams,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = x.len();
    let mut y = x.clone();
    let mut corrections: Vec<Correction> = components
        .iter()
        .map(|op| match op {
            ProjectionOperator::Halfspace { normal, .. } => Correction::Ray {
                alpha: 0.0,
                nsq: normal.norm_squared(),
                ninf: normal.amax(),
            },
            ProjectionOperator::AffineEquality(eq) if eq.c.nrows() == 1 => {
                let row: DVector<f64> = eq.c.row(0).transpose();
                Correction::Plane {
                    mu: 0.0,
                    nsq: row.norm_squared(),
                    ninf: row.amax(),
                    e: eq.e[0],
                    row,
                }
            }
            ProjectionOperator::Box { .. } | ProjectionOperator::NonnegativeOrthant { .. } => {
                Correction::Clamp { p: DVector::zeros(n) }
            }
            _ => Correction::Dense { p: DVector::zeros(n) },
        })
        .collect();
    let mut w = DVector::zeros(n);
    let mut proj = DVector::zeros(n);

    // Convergence is judged by the movement WITHIN a sweep: at the solution
    // every per-set projection returns the same point, so the movement
    // vanishes.  (The end-of-sweep iterate alone can sit still forever on an
    // empty intersection while the corrections diverge.)
    let mut change = f64::INFINITY;
    for _sweep in 0..params.max_sweeps {
        change = 0.0;
        for (op, corr) in components.iter().zip(corrections.iter_mut()) {
            match (op, corr) {
                (
                    ProjectionOperator::Halfspace { normal, offset },
                    Correction::Ray { alpha, nsq, ninf },
                ) => {
                    // w = y + α·normal, so normal·w = normal·y + α‖normal‖²;
                    // the new correction is max(0, slack)/‖normal‖²·normal.
                    let slack = normal.dot(&y) + *alpha * *nsq - offset;
                    let alpha_next = (slack / *nsq).max(0.0);
                    let shift = *alpha - alpha_next;
                    if shift != 0.0 {
                        y.axpy(shift, normal, 1.0);
                    }
                    change = change.max(shift.abs() * *ninf);
                    *alpha = alpha_next;
                }
                (
                    ProjectionOperator::AffineEquality(_),
                    Correction::Plane { mu, row, nsq, ninf, e },
                ) => {
                    let mu_next = (row.dot(&y) + *mu * *nsq - *e) / *nsq;
                    let shift = *mu - mu_next;
                    if shift != 0.0 {
                        y.axpy(shift, row, 1.0);
                    }
                    change = change.max(shift.abs() * *ninf);
                    *mu = mu_next;
                }
                (ProjectionOperator::Box { lo, hi }, Correction::Clamp { p }) => {
                    for k in 0..n {
                        let wk = y[k] + p[k];
                        let pk = wk.clamp(lo[k], hi[k]);
                        p[k] = wk - pk;
                        change = change.max((pk - y[k]).abs());
                        y[k] = pk;
                    }
                }
                (ProjectionOperator::NonnegativeOrthant { .. }, Correction::Clamp { p }) => {
                    for k in 0..n {
                        let wk = y[k] + p[k];
                        let pk = wk.max(0.0);
                        p[k] = wk - pk;
                        change = change.max((pk - y[k]).abs());
                        y[k] = pk;
                    }
                }
                (op, Correction::Dense { p }) => {
                    // w = y + p; project; p = w - P(w); y = P(w)
                    w.copy_from(&y);
                    w += &*p;
                    op.project_into(&w, &mut proj)?;
                    p.copy_from(&w);
                    *p -= &proj;
                    for k in 0..n {
                        change = change.max((proj[k] - y[k]).abs());
                    }
                    y.copy_from(&proj);
                }
                _ => unreachable!("correction kind chosen from the same component list"),
            }
        }
        if change <= params.tol {
            return Ok(y);
        }
    }
    Err(Error::InfeasibleProjection {
        residual: change,
        sweeps: params.max_sweeps,
    })
}

/// First-order storage dynamics behind the demand-response feasible set:
/// s_{τ+1} = a s_τ + b x_τ with s_1 given, inputs bounded per period and the
/// state kept inside its band over the whole horizon.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LoadModel {
    pub a: f64,
    pub b: f64,
    pub s1: f64,
    pub horizon: usize,
    /// Per-period input bounds (lo, hi).
    pub u_bounds: (f64, f64),
    /// State bounds (lo, hi) enforced after every period.
    pub s_bounds: (f64, f64),
}

/// Build the feasible set of one demand-response agent: the input box, one
/// halfspace pair per reachable state, and the total-consumption equality
/// `1ᵀx = budget`.  Zero-coefficient state rows (e.g. b = 0) are checked once
/// and dropped; a constant state outside its band makes the set empty.
pub fn demand_response_set(model: &LoadModel, budget: f64) -> Result<ProjectionOperator> {
    demand_response_set_with(model, budget, DykstraParams::default())
}

/// [`demand_response_set`] with explicit sweep parameters, for runs that
/// trade projection accuracy against wall time.
pub fn demand_response_set_with(
    model: &LoadModel,
    budget: f64,
    params: DykstraParams,
) -> Result<ProjectionOperator> {
    let t = model.horizon;
    if t == 0 {
        return Err(Error::Config("load model horizon must be >= 1".into()));
    }
    let (u_lo, u_hi) = model.u_bounds;
    let (s_lo, s_hi) = model.s_bounds;
    if u_lo > u_hi || s_lo > s_hi {
        return Err(Error::Config("load model bounds have lo > hi".into()));
    }
    let span = (u_lo * t as f64, u_hi * t as f64);
    if budget < span.0 - 1e-12 || budget > span.1 + 1e-12 {
        return Err(Error::Config(format!(
            "consumption budget {budget} outside the reachable range [{}, {}]",
            span.0, span.1
        )));
    }

    let mut components = vec![ProjectionOperator::uniform_box(t, u_lo, u_hi)?];
    // A state halfspace already implied by the input box over its whole
    // range adds nothing to the intersection; keeping it only slows the
    // cyclic projection down.  `worst` is the exact maximum of coefᵀx over
    // the box; the tiny margin keeps a rounding-level misjudgement from
    // shaving the set.
    let implied_by_box = |coef: &DVector<f64>, offset: f64| {
        let worst: f64 = coef
            .iter()
            .map(|&c| c * if c >= 0.0 { u_hi } else { u_lo })
            .sum();
        worst <= offset - 1e-12 * offset.abs().max(1.0)
    };
    // s_{τ+1} = a^τ s_1 + Σ_{k=1..τ} a^{k-1} b x_{τ+1-k}; coefficient on x_j
    // (1-indexed, j <= τ) is a^{τ-j} b.
    for tau in 1..=t {
        let mut coef = DVector::zeros(t);
        for j in 1..=tau {
            coef[j - 1] = model.a.powi((tau - j) as i32) * model.b;
        }
        let drift = model.a.powi(tau as i32) * model.s1;
        if coef.norm_squared() == 0.0 {
            if drift < s_lo - 1e-12 || drift > s_hi + 1e-12 {
                return Err(Error::Config(format!(
                    "state after period {tau} is constant at {drift}, outside [{s_lo}, {s_hi}]"
                )));
            }
            continue;
        }
        if !implied_by_box(&coef, s_hi - drift) {
            components.push(ProjectionOperator::halfspace(coef.clone(), s_hi - drift)?);
        }
        let neg = -coef;
        if !implied_by_box(&neg, drift - s_lo) {
            components.push(ProjectionOperator::halfspace(neg, drift - s_lo)?);
        }
    }
    components.push(ProjectionOperator::affine_equality(
        DMatrix::from_element(1, t, 1.0),
        DVector::from_element(1, budget),
    )?);
    ProjectionOperator::intersection(components, params)
}

// ---------------------------------------------------------------------------
// serde mirror: plain Vec-based shape with construction-time validation

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum RawOp {
    Free {
        dim: usize,
    },
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    NonnegativeOrthant {
        dim: usize,
    },
    Halfspace {
        normal: Vec<f64>,
        offset: f64,
    },
    AffineEquality {
        c: Vec<Vec<f64>>,
        e: Vec<f64>,
    },
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Intersection {
        components: Vec<RawOp>,
        #[serde(default = "default_tol")]
        tol: f64,
        #[serde(default = "default_sweeps")]
        max_sweeps: usize,
    },
}

fn default_tol() -> f64 {
    DykstraParams::default().tol
}

fn default_sweeps() -> usize {
    DykstraParams::default().max_sweeps
}

/// Row-major nested Vec -> DMatrix, rejecting ragged rows.
pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], context: &'static str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Config(format!("{context}: matrix has no rows")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{context}: ragged matrix rows")));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flatten().copied(),
    ))
}

impl TryFrom<RawOp> for ProjectionOperator {
    type Error = Error;

    fn try_from(raw: RawOp) -> Result<Self> {
        match raw {
            RawOp::Free { dim } => Ok(ProjectionOperator::free(dim)),
            RawOp::Box { lo, hi } => {
                ProjectionOperator::box_set(DVector::from_vec(lo), DVector::from_vec(hi))
            }
            RawOp::NonnegativeOrthant { dim } => Ok(ProjectionOperator::nonneg(dim)),
            RawOp::Halfspace { normal, offset } => {
                ProjectionOperator::halfspace(DVector::from_vec(normal), offset)
            }
            RawOp::AffineEquality { c, e } => {
                let c = matrix_from_rows(&c, "equality set")?;
                ProjectionOperator::affine_equality(c, DVector::from_vec(e))
            }
            RawOp::Ball { center, radius } => {
                ProjectionOperator::ball(DVector::from_vec(center), radius)
            }
            RawOp::Intersection {
                components,
                tol,
                max_sweeps,
            } => {
                let components = components
                    .into_iter()
                    .map(ProjectionOperator::try_from)
                    .collect::<Result<Vec<_>>>()?;
                ProjectionOperator::intersection(components, DykstraParams { tol, max_sweeps })
            }
        }
    }
}

impl From<ProjectionOperator> for RawOp {
    fn from(op: ProjectionOperator) -> Self {
        match op {
            ProjectionOperator::Free { dim } => RawOp::Free { dim },
            ProjectionOperator::Box { lo, hi } => RawOp::Box {
                lo: lo.iter().copied().collect(),
                hi: hi.iter().copied().collect(),
            },
            ProjectionOperator::NonnegativeOrthant { dim } => RawOp::NonnegativeOrthant { dim },
            ProjectionOperator::Halfspace { normal, offset } => RawOp::Halfspace {
                normal: normal.iter().copied().collect(),
                offset,
            },
            ProjectionOperator::AffineEquality(eq) => RawOp::AffineEquality {
                c: eq
                    .c
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect(),
                e: eq.e.iter().copied().collect(),
            },
            ProjectionOperator::Ball { center, radius } => RawOp::Ball {
                center: center.iter().copied().collect(),
                radius,
            },
            ProjectionOperator::Intersection { components, params } => RawOp::Intersection {
                components: components.into_iter().map(RawOp::from).collect(),
                tol: params.tol,
                max_sweeps: params.max_sweeps,
            },
        }
    }
}
