//! Communication networks: doubly stochastic mixing matrices over strongly
//! connected digraphs.
//!
//! The network stores sparse in-neighbor rows `w_ij` (j -> i edges, self loop
//! included).  Mixing is applied channel-wise: a tracker with d channels is
//! mixed by applying W to each channel, never by materializing W ⊗ I_d.
//! `validate` reports everything as data (sum residuals, connectivity, the
//! contraction factor on the consensus-orthogonal subspace) so callers decide
//! what is fatal.

use nalgebra::{DMatrix, DVector};
use petgraph::graph::DiGraph;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row/column sums for the doubly-stochastic check.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct CommNetwork {
    n: usize,
    /// Per-receiver in-neighbor list `(sender, weight)`, sorted by sender,
    /// self loop included when its weight is nonzero.
    rows: Vec<Vec<(usize, f64)>>,
}

impl CommNetwork {
    /// Build from explicit in-neighbor rows. Structural checks only; the
    /// stochasticity and connectivity checks live in [`CommNetwork::validate`].
    pub fn from_weight_rows(n: usize, mut rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::dim_global("weight rows", n, rows.len()));
        }
        for (i, row) in rows.iter_mut().enumerate() {
            row.sort_by_key(|&(j, _)| j);
            for win in row.windows(2) {
                if win[0].0 == win[1].0 {
                    return Err(Error::Config(format!(
                        "duplicate in-neighbor {} for agent {i}",
                        win[0].0
                    )));
                }
            }
            for &(j, w) in row.iter() {
                if j >= n {
                    return Err(Error::Config(format!(
                        "agent {i} lists in-neighbor {j} outside 0..{n}"
                    )));
                }
                if !w.is_finite() {
                    return Err(Error::Config(format!("non-finite weight w[{i}][{j}]")));
                }
            }
            row.retain(|&(_, w)| w != 0.0);
        }
        Ok(CommNetwork { n, rows })
    }

    /// Build from a dense weight matrix (rows index receivers).
    pub fn from_dense(w: &DMatrix<f64>) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::dim_global("square weight matrix", w.nrows(), w.ncols()));
        }
        let n = w.nrows();
        let rows = (0..n)
            .map(|i| (0..n).map(|j| (j, w[(i, j)])).collect())
            .collect();
        Self::from_weight_rows(n, rows)
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    /// In-neighbors of agent `i` as `(sender, weight)`, ascending by sender.
    pub fn in_neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn self_weight(&self, i: usize) -> f64 {
        self.rows[i]
            .iter()
            .find(|&&(j, _)| j == i)
            .map_or(0.0, |&(_, w)| w)
    }

    pub fn min_self_weight(&self) -> f64 {
        (0..self.n)
            .map(|i| self.self_weight(i))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, wij) in row {
                w[(i, j)] = wij;
            }
        }
        w
    }

    /// One round of channel-wise mixing: `out[i] = Σ_j w_ij states[j]`.
    ///
    /// Diagnostics-grade (plain accumulation); the engines run their own
    /// compensated version of this loop.
    pub fn apply(&self, states: &[DVector<f64>]) -> Vec<DVector<f64>> {
        assert_eq!(states.len(), self.n, "one state per agent");
        (0..self.n)
            .map(|i| {
                let d = states[i].len();
                let mut out = DVector::zeros(d);
                for &(j, w) in &self.rows[i] {
                    out.axpy(w, &states[j], 1.0);
                }
                out
            })
            .collect()
    }

    /// Validation report: stochasticity residuals, connectivity, and the
    /// contraction factor of W on the consensus-orthogonal subspace.
    pub fn validate(&self) -> NetworkReport {
        let w = self.dense();
        let n = self.n;
        let mut max_row_err = 0.0f64;
        let mut max_col_err = 0.0f64;
        let mut min_weight = f64::INFINITY;
        for i in 0..n {
            let row_sum: f64 = (0..n).map(|j| w[(i, j)]).sum();
            let col_sum: f64 = (0..n).map(|j| w[(j, i)]).sum();
            max_row_err = max_row_err.max((row_sum - 1.0).abs());
            max_col_err = max_col_err.max((col_sum - 1.0).abs());
            for j in 0..n {
                min_weight = min_weight.min(w[(i, j)]);
            }
        }

        // strong connectivity of the positive-weight digraph
        let mut graph = DiGraph::<(), ()>::new();
        let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, wij) in row {
                if i != j && wij > 0.0 {
                    graph.add_edge(nodes[j], nodes[i], ());
                }
            }
        }
        let n_scc = petgraph::algo::tarjan_scc(&graph).len();
        let strongly_connected = n_scc == 1;

        // ς = ||P W P||₂ with P = I - 11ᵀ/n: the per-round contraction of the
        // disagreement component under mixing
        let p = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let m = &p * &w * &p;
        let contraction_factor = if n == 1 {
            0.0
        } else {
            m.svd(false, false).singular_values.max()
        };

        let mut violations = Vec::new();
        if max_row_err > STOCHASTIC_TOL {
            violations.push(format!("row sums deviate from 1 by {max_row_err:.3e}"));
        }
        if max_col_err > STOCHASTIC_TOL {
            violations.push(format!("column sums deviate from 1 by {max_col_err:.3e}"));
        }
        if min_weight < 0.0 {
            violations.push(format!("negative weight {min_weight:.3e}"));
        }
        if !strongly_connected {
            violations.push(format!("digraph is not strongly connected ({n_scc} components)"));
        }

        NetworkReport {
            n_agents: n,
            max_row_sum_err: max_row_err,
            max_col_sum_err: max_col_err,
            min_weight,
            min_self_weight: self.min_self_weight(),
            strongly_connected,
            n_scc,
            contraction_factor,
            violations,
        }
    }
}

/// Outcome of [`CommNetwork::validate`]; violations are data, not errors.
#[derive(Clone, Debug, Serialize)]
pub struct NetworkReport {
    pub n_agents: usize,
    pub max_row_sum_err: f64,
    pub max_col_sum_err: f64,
    pub min_weight: f64,
    pub min_self_weight: f64,
    pub strongly_connected: bool,
    pub n_scc: usize,
    /// ς: operator norm of W restricted to the consensus-orthogonal subspace.
    pub contraction_factor: f64,
    pub violations: Vec<String>,
}

impl NetworkReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    /// Render the report back as a single assumption error, if invalid.
    pub fn into_result(self) -> Result<Self> {
        if self.is_valid() {
            Ok(self)
        } else {
            Err(Error::Assumption(format!(
                "network validation failed: {}",
                self.violations.join("; ")
            )))
        }
    }
}

/// Symmetric ring: self loop plus both ring neighbors, weights
/// `(self_weight, (1-self_weight)/2, (1-self_weight)/2)`.
pub fn build_ring(n: usize, self_weight: f64) -> Result<CommNetwork> {
    if n < 2 {
        return Err(Error::Config("ring needs at least 2 agents".into()));
    }
    if !(self_weight > 0.0 && self_weight < 1.0) {
        return Err(Error::Config(format!(
            "ring self weight must lie in (0, 1), got {self_weight}"
        )));
    }
    let side = (1.0 - self_weight) / 2.0;
    let rows = (0..n)
        .map(|i| {
            let prev = (i + n - 1) % n;
            let next = (i + 1) % n;
            if prev == next {
                // n = 2: both ring neighbors are the same node
                vec![(i, self_weight), (prev, 1.0 - self_weight)]
            } else {
                vec![(i, self_weight), (prev, side), (next, side)]
            }
        })
        .collect();
    CommNetwork::from_weight_rows(n, rows)
}

/// Complete graph with uniform weights 1/n (the Metropolis weights of K_n).
pub fn build_complete(n: usize) -> Result<CommNetwork> {
    if n < 1 {
        return Err(Error::Config("network needs at least 1 agent".into()));
    }
    let all: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    if n == 1 {
        return CommNetwork::from_weight_rows(1, vec![vec![(0, 1.0)]]);
    }
    build_metropolis(n, &all)
}

/// Metropolis-Hastings weights on an undirected graph:
/// `w_ij = 1 / (1 + max(deg_i, deg_j))` for each edge, diagonal filled to
/// make rows sum to one.  Errors if the graph is disconnected.
pub fn build_metropolis(n: usize, edges: &[(usize, usize)]) -> Result<CommNetwork> {
    if n < 2 {
        return Err(Error::Config("metropolis weights need at least 2 agents".into()));
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(Error::Config(format!("edge ({a}, {b}) outside 0..{n}")));
        }
        if a == b {
            return Err(Error::Config(format!("self loop ({a}, {a}) in edge list")));
        }
        if !adj[a].contains(&b) {
            adj[a].push(b);
            adj[b].push(a);
        }
    }

    let components = undirected_components(&adj);
    if components.len() != 1 {
        let listing: Vec<String> = components.iter().map(|c| format!("{c:?}")).collect();
        return Err(Error::Assumption(format!(
            "graph is disconnected; components: {}",
            listing.join(", ")
        )));
    }

    let deg: Vec<usize> = adj.iter().map(|a| a.len()).collect();
    let rows = (0..n)
        .map(|i| {
            let mut row: Vec<(usize, f64)> = adj[i]
                .iter()
                .map(|&j| (j, 1.0 / (1.0 + deg[i].max(deg[j]) as f64)))
                .collect();
            let off_sum: f64 = row.iter().map(|&(_, w)| w).sum();
            row.push((i, 1.0 - off_sum));
            row
        })
        .collect();
    CommNetwork::from_weight_rows(n, rows)
}

fn undirected_components(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut components = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut comp = Vec::new();
        seen[start] = true;
        while let Some(u) = stack.pop() {
            comp.push(u);
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

/// Erdős–Rényi G(n, p) with Metropolis weights, resampled (from the same
/// seeded stream) until connected.  Deterministic for a fixed seed.
pub fn build_erdos_renyi(n: usize, p: f64, seed: u64) -> Result<CommNetwork> {
    if n < 2 {
        return Err(Error::Config("random graph needs at least 2 agents".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("edge probability must be in [0, 1], got {p}")));
    }
    const ATTEMPTS: usize = 128;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..ATTEMPTS {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        match build_metropolis(n, &edges) {
            Ok(net) => return Ok(net),
            Err(Error::Assumption(_)) => continue, // disconnected draw
            Err(e) => return Err(e),
        }
    }
    Err(Error::Assumption(format!(
        "no connected G({n}, {p}) draw in {ATTEMPTS} attempts; raise p"
    )))
}

/// JSON-loadable network description.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "topology", rename_all = "snake_case")]
pub enum NetworkSpec {
    Ring {
        n: usize,
        #[serde(default = "default_self_weight")]
        self_weight: f64,
    },
    ErdosRenyi {
        n: usize,
        p: f64,
        /// Omitted -> the caller's run seed is used.
        #[serde(default)]
        seed: Option<u64>,
    },
    Complete {
        n: usize,
    },
    Explicit {
        weights: Vec<Vec<f64>>,
    },
}

fn default_self_weight() -> f64 {
    0.5
}

impl NetworkSpec {
    pub fn build(&self, fallback_seed: u64) -> Result<CommNetwork> {
        match self {
            NetworkSpec::Ring { n, self_weight } => build_ring(*n, *self_weight),
            NetworkSpec::ErdosRenyi { n, p, seed } => {
                build_erdos_renyi(*n, *p, seed.unwrap_or(fallback_seed))
            }
            NetworkSpec::Complete { n } => build_complete(*n),
            NetworkSpec::Explicit { weights } => {
                let m = crate::projection::matrix_from_rows(weights, "explicit network")?;
                CommNetwork::from_dense(&m)
            }
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            NetworkSpec::Ring { n, .. }
            | NetworkSpec::ErdosRenyi { n, .. }
            | NetworkSpec::Complete { n } => *n,
            NetworkSpec::Explicit { weights } => weights.len(),
        }
    }
}
