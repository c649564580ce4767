//! Independent oracles shared by the integration and acceptance suites.
//! Everything here deliberately avoids the library's message-passing and
//! closed-form code paths.

use nalgebra::{Cholesky, DMatrix, DVector};
use pydt::data::DataSet;
use pydt::tree::{NodeId, Tree};

/// Time of the deepest shared ancestor of two nodes (their own time if one
/// contains the other).
fn shared_ancestor_time(tree: &Tree, a: NodeId, b: NodeId) -> f64 {
    let pa = tree.path_from_root(a);
    let pb = tree.path_from_root(b);
    let mut t = 0.0;
    for (x, y) in pa.iter().zip(pb.iter()) {
        if x != y {
            break;
        }
        t = tree.node(*x).time;
    }
    t
}

/// Dense joint covariance of Brownian values at all non-root nodes:
/// Cov(x_a, x_b) = sigma2 * (time of the deepest shared ancestor).
pub struct DenseOracle {
    pub leaves: Vec<NodeId>,
    pub internals: Vec<NodeId>,
    chol_ll: Cholesky<f64, nalgebra::Dyn>,
    sigma_il: DMatrix<f64>,
    sigma_ii: DMatrix<f64>,
    log_det_ll: f64,
}

impl DenseOracle {
    pub fn new(tree: &Tree, sigma2: f64) -> Self {
        let leaves = tree.leaves();
        let internals = tree.internal_nodes();
        let cov = |a: NodeId, b: NodeId| -> f64 {
            if a == b {
                sigma2 * tree.node(a).time
            } else {
                sigma2 * shared_ancestor_time(tree, a, b)
            }
        };
        let nl = leaves.len();
        let ni = internals.len();
        let sigma_ll = DMatrix::from_fn(nl, nl, |i, j| cov(leaves[i], leaves[j]));
        let sigma_il = DMatrix::from_fn(ni, nl, |i, j| cov(internals[i], leaves[j]));
        let sigma_ii = DMatrix::from_fn(ni, ni, |i, j| cov(internals[i], internals[j]));
        let chol_ll = Cholesky::new(sigma_ll).expect("leaf covariance must be PD");
        let log_det_ll = 2.0 * chol_ll.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Self {
            leaves,
            internals,
            chol_ll,
            sigma_il,
            sigma_ii,
            log_det_ll,
        }
    }

    fn leaf_vector(&self, tree: &Tree, data: &DataSet, dim: usize) -> DVector<f64> {
        DVector::from_fn(self.leaves.len(), |i, _| {
            let ix = tree.node(self.leaves[i]).leaf_index.unwrap();
            data.row(ix)[dim]
        })
    }

    /// Log marginal likelihood of exact leaf observations.
    pub fn log_ml(&self, tree: &Tree, data: &DataSet) -> f64 {
        let nl = self.leaves.len() as f64;
        let mut total = 0.0;
        for d in 0..data.dim() {
            let y = self.leaf_vector(tree, data, d);
            let solved = self.chol_ll.solve(&y);
            total += -0.5 * y.dot(&solved)
                - 0.5 * self.log_det_ll
                - 0.5 * nl * (2.0 * std::f64::consts::PI).ln();
        }
        total
    }

    /// Posterior means (per internal node, per dimension) and the posterior
    /// covariance of internal locations (shared across dimensions).
    pub fn conditional(&self, tree: &Tree, data: &DataSet) -> (Vec<Vec<f64>>, DMatrix<f64>) {
        let ni = self.internals.len();
        let mut means = vec![vec![0.0; data.dim()]; ni];
        for d in 0..data.dim() {
            let y = self.leaf_vector(tree, data, d);
            let m = &self.sigma_il * self.chol_ll.solve(&y);
            for i in 0..ni {
                means[i][d] = m[i];
            }
        }
        let cov = &self.sigma_ii
            - &self.sigma_il * self.chol_ll.solve(&self.sigma_il.transpose());
        (means, cov)
    }
}

/// Binary-tree density coded independently of the library: factorials and
/// plain harmonic numbers, no log-Gamma, no generalized sums.
pub fn ddt_log_structure_times(tree: &Tree, c: f64) -> f64 {
    fn ln_factorial(n: usize) -> f64 {
        (2..=n).map(|k| (k as f64).ln()).sum()
    }
    fn harmonic(n: usize) -> f64 {
        (1..=n).map(|k| 1.0 / k as f64).sum()
    }
    let mut total = 0.0;
    for id in tree.preorder() {
        let node = tree.node(id);
        if let Some(parent) = node.parent {
            let m = node.leaf_count;
            if m >= 2 {
                let (ta, tb) = (tree.node(parent).time, node.time);
                let a_cum = |t: f64| -c * (1.0 - t).ln();
                total += (a_cum(ta) - a_cum(tb)) * harmonic(m - 1);
            }
        }
        if node.is_internal() {
            assert_eq!(node.degree(), 2, "oracle only covers binary trees");
            let counts = tree.child_counts(id);
            total += (c / (1.0 - node.time)).ln();
            total += ln_factorial(counts[0] - 1) + ln_factorial(counts[1] - 1)
                - ln_factorial(node.leaf_count - 1);
        }
    }
    total
}

/// Step-by-step branching factor of a single branch point: replay the branch
/// choices of a canonical arrival order (each branch filled in turn) as raw
/// per-sample probabilities.
pub fn branch_factor_step_by_step(counts: &[usize], alpha: f64, beta: f64) -> f64 {
    let m: usize = counts.iter().sum();
    let mut log_p = 0.0;
    // sample n1 + 1 creates the branch point after n1 samples passed
    let n1 = counts[0];
    log_p += statrs::function::gamma::ln_gamma(n1 as f64 - beta)
        - statrs::function::gamma::ln_gamma(n1 as f64 + 1.0 + alpha);
    let mut present = vec![0usize; counts.len()];
    present[0] = n1;
    present[1] = 1;
    let mut k_open = 2usize;
    let mut arrived = n1 + 1;
    // fill branch 2 beyond its creator, then create and fill 3, 4, ...
    for branch in 1..counts.len() {
        let start = if branch == 1 { 1 } else { 0 };
        for _ in start..counts[branch] {
            if present[branch] == 0 {
                // this sample opens the branch
                log_p += (alpha + (k_open as f64) * beta).ln()
                    - (arrived as f64 + alpha).ln();
                k_open += 1;
            } else {
                log_p += (present[branch] as f64 - beta).ln()
                    - (arrived as f64 + alpha).ln();
            }
            present[branch] += 1;
            arrived += 1;
        }
    }
    assert_eq!(arrived, m);
    log_p
}
