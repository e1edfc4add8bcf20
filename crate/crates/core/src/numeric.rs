//! Compensated floating-point accumulation.
//!
//! The tracking states of the distributed algorithms are zero-mean by
//! construction: the column sums of the mixing matrix are one, so the sum of
//! the trackers over agents stays exactly zero in real arithmetic.  Plain f64
//! row updates lose that invariant at a rate of roughly `N * eps * scale` per
//! iteration, which over tens of thousands of iterations at state scales of
//! 1e3..1e4 drifts past the 1e-10 budget the diagnostics promise.  Carrying a
//! per-component compensation term (a running Neumaier sum) keeps the
//! accumulated value exact to second order, so the only residual visible to
//! an observer of the rounded state is the one-time representation error.

use nalgebra::DVector;

/// Error-free sum: returns `(s, e)` with `s = fl(a + b)` and `a + b = s + e`.
#[inline]
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let ap = s - b;
    let bp = s - ap;
    (s, (a - ap) + (b - bp))
}

/// Error-free product via fused multiply-add: `a * b = p + e` exactly.
#[inline]
pub fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Running sum with a carried compensation term (Kahan-Neumaier).
#[derive(Clone, Copy, Debug, Default)]
pub struct Compensated {
    hi: f64,
    lo: f64,
}

impl Compensated {
    #[inline]
    pub fn new(v: f64) -> Self {
        Compensated { hi: v, lo: 0.0 }
    }

    #[inline]
    pub fn add(&mut self, term: f64) {
        let (s, e) = two_sum(self.hi, term);
        self.hi = s;
        self.lo += e;
    }

    /// Accumulate `w * v` without dropping the product's rounding error.
    #[inline]
    pub fn add_prod(&mut self, w: f64, v: f64) {
        let (p, e) = two_prod(w, v);
        self.add(p);
        self.lo += e;
    }

    /// Rounded value of the accumulated sum.
    #[inline]
    pub fn value(self) -> f64 {
        self.hi + self.lo
    }

    /// Split the sum into a rounded head and the exact remainder.
    #[inline]
    pub fn split(self) -> (f64, f64) {
        let hi = self.hi + self.lo;
        // `self.hi - hi` is exact: the two values are within one ulp scale.
        (hi, (self.hi - hi) + self.lo)
    }
}

/// Compensated sum of an iterator of terms.
pub fn comp_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = Compensated::default();
    for t in terms {
        acc.add(t);
    }
    acc.value()
}

/// Component-wise compensated sum of equal-length vectors, in slice order.
pub fn compensated_vector_sum(vs: &[DVector<f64>]) -> DVector<f64> {
    assert!(!vs.is_empty(), "sum of zero vectors has no dimension");
    let d = vs[0].len();
    DVector::from_fn(d, |k, _| comp_sum(vs.iter().map(|v| v[k])))
}

/// Component-wise compensated mean of equal-length vectors, in slice order.
pub fn compensated_mean(vs: &[DVector<f64>]) -> DVector<f64> {
    let mut s = compensated_vector_sum(vs);
    s /= vs.len() as f64;
    s
}

/// Dense vector stored as a rounded head plus a compensation carry.
///
/// `hi` is the canonical f64 state every consumer sees; `hi + lo` is the
/// (near-)exact accumulated value carried across iterations.
#[derive(Clone, Debug)]
pub struct CompVec {
    pub hi: DVector<f64>,
    pub lo: DVector<f64>,
}

impl CompVec {
    pub fn zeros(n: usize) -> Self {
        CompVec {
            hi: DVector::zeros(n),
            lo: DVector::zeros(n),
        }
    }

    pub fn len(&self) -> usize {
        self.hi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hi.len() == 0
    }

    /// Store a freshly accumulated component, renormalizing head and carry.
    #[inline]
    pub fn set(&mut self, k: usize, acc: Compensated) {
        let (hi, lo) = acc.split();
        self.hi[k] = hi;
        self.lo[k] = lo;
    }
}
