//! Shared test-only oracle: exact projection onto a small polyhedron by
//! brute-force enumeration of candidate active sets.  Exponential in the
//! number of inequality rows, so strictly for cross-checking the iterative
//! projectors on small instances.

use nalgebra::{DMatrix, DVector};

/// {x : a·x <= b for (a, b) in ineq, a·x = b for (a, b) in eq}.
pub struct Polyhedron {
    pub dim: usize,
    pub ineq: Vec<(DVector<f64>, f64)>,
    pub eq: Vec<(DVector<f64>, f64)>,
}

impl Polyhedron {
    pub fn new(dim: usize) -> Self {
        Polyhedron {
            dim,
            ineq: Vec::new(),
            eq: Vec::new(),
        }
    }

    pub fn add_inequality(&mut self, a: DVector<f64>, b: f64) {
        assert_eq!(a.len(), self.dim);
        self.ineq.push((a, b));
    }

    pub fn add_equality(&mut self, a: DVector<f64>, b: f64) {
        assert_eq!(a.len(), self.dim);
        self.eq.push((a, b));
    }

    pub fn add_box(&mut self, lo: &DVector<f64>, hi: &DVector<f64>) {
        for k in 0..self.dim {
            let mut up = DVector::zeros(self.dim);
            up[k] = 1.0;
            self.add_inequality(up, hi[k]);
            let mut down = DVector::zeros(self.dim);
            down[k] = -1.0;
            self.add_inequality(down, -lo[k]);
        }
    }

    pub fn feasible(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.ineq.iter().all(|(a, b)| a.dot(x) <= b + tol)
            && self.eq.iter().all(|(a, b)| (a.dot(x) - b).abs() <= tol)
    }
}

/// Exact Euclidean projection of `v` onto `poly`.
///
/// The problem min ½‖x − v‖² over the polyhedron is strictly convex, so any
/// point satisfying the KKT conditions is the unique optimum.  Candidate
/// active sets are enumerated by size; for each, the equality-constrained
/// minimizer and its multipliers come from one dense solve of the normal
/// equations.  The first candidate that is primal feasible with nonnegative
/// inequality multipliers wins.  By Carathéodory's cone theorem a linearly
/// independent active set suffices, so subsets larger than the dimension
/// are never needed.
pub fn qp_project(poly: &Polyhedron, v: &DVector<f64>) -> DVector<f64> {
    let n = poly.dim;
    let p = poly.eq.len();
    let m = poly.ineq.len();
    assert!(p <= n, "more equality rows than dimensions");
    let feas_tol = 1e-8;

    let max_active = n - p;
    let mut subset: Vec<usize> = Vec::new();
    for size in 0..=max_active.min(m) {
        subset.clear();
        subset.extend(0..size);
        loop {
            if let Some(x) = try_active_set(poly, v, &subset, feas_tol) {
                return x;
            }
            // Advance the lexicographic combination of `size` indices.
            if !next_combination(&mut subset, m) {
                break;
            }
        }
    }
    panic!("no KKT-consistent active set found; is the polyhedron empty?");
}

/// Step `idx` to the next combination of its length out of {0..m}; false
/// when exhausted.
fn next_combination(idx: &mut [usize], m: usize) -> bool {
    let k = idx.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] + (k - i) <= m {
            // idx[i] can still be bumped without overflowing the tail.
            if idx[i] + 1 + (k - 1 - i) < m {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                return true;
            }
        }
    }
    false
}

fn try_active_set(
    poly: &Polyhedron,
    v: &DVector<f64>,
    active: &[usize],
    tol: f64,
) -> Option<DVector<f64>> {
    let n = poly.dim;
    let p = poly.eq.len();
    let rows = p + active.len();

    if rows == 0 {
        return poly.feasible(v, tol).then(|| v.clone());
    }

    // Stationarity: x = v − Cᵀw with C the active rows; substituting into
    // C x = r gives (C Cᵀ) w = C v − r.
    let mut c = DMatrix::zeros(rows, n);
    let mut r = DVector::zeros(rows);
    for (row, (a, b)) in poly.eq.iter().enumerate() {
        c.row_mut(row).copy_from(&a.transpose());
        r[row] = *b;
    }
    for (k, &idx) in active.iter().enumerate() {
        let (a, b) = &poly.ineq[idx];
        c.row_mut(p + k).copy_from(&a.transpose());
        r[p + k] = *b;
    }

    let gram = &c * c.transpose();
    let rhs = &c * v - &r;
    // A singular Gram means the candidate rows are dependent; some other
    // subset reaches the same point with independent rows.
    let w = gram.lu().solve(&rhs)?;
    let x = v - c.transpose() * &w;

    // Dual feasibility for the inequality rows, then primal feasibility.
    if w.rows_range(p..).iter().any(|&mu| mu < -tol) {
        return None;
    }
    poly.feasible(&x, tol).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn combinations_enumerate_everything_once() {
        let mut idx = vec![0, 1];
        let mut seen = vec![idx.clone()];
        while next_combination(&mut idx, 4) {
            seen.push(idx.clone());
        }
        assert_eq!(
            seen,
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
    }

    #[test]
    fn projects_onto_boxes_and_planes() {
        let mut poly = Polyhedron::new(2);
        poly.add_box(&v(&[0.0, 0.0]), &v(&[1.0, 1.0]));
        assert_eq!(qp_project(&poly, &v(&[2.0, 0.5])), v(&[1.0, 0.5]));
        assert_eq!(qp_project(&poly, &v(&[0.3, 0.4])), v(&[0.3, 0.4]));

        poly.add_equality(v(&[1.0, 1.0]), 1.0);
        let x = qp_project(&poly, &v(&[1.0, 1.0]));
        assert!((x - v(&[0.5, 0.5])).amax() < 1e-12);
    }

    #[test]
    fn active_inequalities_get_multipliers() {
        // Project the origin-side point onto {x1 + x2 >= 1} ∩ [0,1]².
        let mut poly = Polyhedron::new(2);
        poly.add_box(&v(&[0.0, 0.0]), &v(&[1.0, 1.0]));
        poly.add_inequality(v(&[-1.0, -1.0]), -1.0);
        let x = qp_project(&poly, &v(&[0.1, 0.1]));
        assert!((x - v(&[0.5, 0.5])).amax() < 1e-12);
    }
}
