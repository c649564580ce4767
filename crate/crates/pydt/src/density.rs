//! Exact log joint density of (structure, times, locations), split into the
//! three factors used by inference, plus a sequential replay of the
//! generative process that serves as an independent oracle.

use statrs::function::gamma::ln_gamma;

use crate::divergence::{
    h_gen_table, j_factor, log_count_damping, DivergenceFn, ReciprocalDivergence,
};
use crate::error::{Error, Result};
use crate::hyper::Hyperparams;
use crate::tree::{NodeId, Tree};

/// Log Gaussian density of `x` around `mean` with variance `var`.
pub(crate) fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * d * d / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
}

fn log_normal_pdf_vec(x: &[f64], mean: &[f64], var: f64) -> f64 {
    x.iter()
        .zip(mean)
        .map(|(&a, &b)| log_normal_pdf(a, b, var))
        .sum()
}

/// Log branching factor of a single branch point with the given per-branch
/// counts, excluding the divergence rate at its time (that part lives in the
/// times factor).
///
/// Derived by multiplying the per-sample branch choices: the new-branch
/// numerators for branches 3..K, a Gamma ratio per branch for the follow
/// choices, and one `1 / Gamma(1 - beta)` per branch after the first.
pub fn structure_factor_counts(counts: &[usize], alpha: f64, beta: f64) -> Result<f64> {
    let k = counts.len();
    if k < 2 || counts.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!(
            "branch point needs >= 2 nonempty branches, got {counts:?}"
        )));
    }
    let m: usize = counts.iter().sum();
    // product over k = 3..=K of (alpha + (k-1) beta), in closed form
    let widen = if k == 2 {
        0.0
    } else if beta == 0.0 {
        if alpha == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        (k as f64 - 2.0) * alpha.ln()
    } else {
        let r = alpha / beta;
        (k as f64 - 2.0) * beta.ln() + ln_gamma(r + k as f64) - ln_gamma(r + 2.0)
    };
    let follows: f64 = counts
        .iter()
        .map(|&n| ln_gamma(n as f64 - beta))
        .sum::<f64>();
    Ok(widen + follows - ln_gamma(m as f64 + alpha) - (k as f64 - 1.0) * ln_gamma(1.0 - beta))
}

/// Log branching factor of internal node `node`.
pub fn structure_factor_node(tree: &Tree, node: NodeId, alpha: f64, beta: f64) -> Result<f64> {
    if !tree.node(node).is_internal() {
        return Err(Error::InvalidArgument(
            "structure factor defined for internal nodes".into(),
        ));
    }
    structure_factor_counts(&tree.child_counts(node), alpha, beta)
}

/// Sum of the branching factors over all internal nodes.
pub fn structure_factor(tree: &Tree, alpha: f64, beta: f64) -> Result<f64> {
    let mut total = 0.0;
    for id in tree.internal_nodes() {
        total += structure_factor_node(tree, id, alpha, beta)?;
    }
    Ok(total)
}

/// Log factor of the divergence times given the structure: survival terms on
/// every edge followed by two or more points, plus the divergence rate at
/// each internal node.
pub fn times_factor(tree: &Tree, hyper: &Hyperparams) -> Result<f64> {
    let div = ReciprocalDivergence { c: hyper.c };
    let n = tree.n_leaves();
    let table = h_gen_table(n.saturating_sub(1), hyper.alpha, hyper.beta);
    let mut total = 0.0;
    for id in tree.preorder() {
        let node = tree.node(id);
        if let Some(parent) = node.parent {
            let m = node.leaf_count;
            if m >= 2 {
                let t_a = tree.node(parent).time;
                if node.time >= 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "internal node at t = {}", node.time
                    )));
                }
                total += (div.cumulative(t_a) - div.cumulative(node.time)) * table[m - 1];
            }
        }
        if node.is_internal() {
            total += div.rate(node.time).ln();
        }
    }
    Ok(total)
}

/// Log factor of all node locations given times: one Gaussian per edge.
pub fn locations_factor(tree: &Tree, sigma2: f64) -> Result<f64> {
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 = {sigma2}")));
    }
    let mut total = 0.0;
    for id in tree.preorder() {
        let node = tree.node(id);
        let Some(parent) = node.parent else { continue };
        let dt = node.time - tree.node(parent).time;
        if dt <= 0.0 {
            return Err(Error::DegenerateEdge(id));
        }
        let x = node.location.as_ref().ok_or(Error::MissingLocation(id))?;
        let base = tree
            .node(parent)
            .location
            .as_ref()
            .ok_or(Error::MissingLocation(parent))?;
        total += log_normal_pdf_vec(x, base, sigma2 * dt);
    }
    Ok(total)
}

/// Exact log joint of (structure, times, locations).
pub fn log_joint(tree: &Tree, hyper: &Hyperparams) -> Result<f64> {
    Ok(structure_factor(tree, hyper.alpha, hyper.beta)?
        + times_factor(tree, hyper)?
        + locations_factor(tree, hyper.sigma2)?)
}

/// Log density of a branch point's divergence time given its branch counts:
/// `ln c + (c J - 1) ln(1 - t)`.
pub fn time_node_density(t: f64, counts: &[usize], hyper: &Hyperparams) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "divergence time {t} outside (0, 1)"
        )));
    }
    let j = j_factor(counts, hyper.alpha, hyper.beta)?;
    Ok(hyper.c.ln() + (hyper.c * j - 1.0) * (1.0 - t).ln())
}

/// Replay the generative process point by point in the given insertion order
/// and accumulate the exact log density of (structure, times, locations).
/// Agrees with `log_joint` for every ordering; kept as an independent oracle
/// rather than a production code path.
pub fn sequential_log_prob(tree: &Tree, ordering: &[usize], hyper: &Hyperparams) -> Result<f64> {
    let n = tree.n_leaves();
    if ordering.len() != n {
        return Err(Error::InvalidArgument(format!(
            "ordering length {} != {} leaves",
            ordering.len(),
            n
        )));
    }
    let mut seen = vec![false; n];
    for &ix in ordering {
        if ix >= n || seen[ix] {
            return Err(Error::InvalidArgument(format!(
                "ordering is not a permutation (index {ix})"
            )));
        }
        seen[ix] = true;
    }

    let div = ReciprocalDivergence { c: hyper.c };
    let (alpha, beta) = (hyper.alpha, hyper.beta);
    let arena = tree
        .node_ids()
        .iter()
        .map(|i| i.index())
        .max()
        .map_or(1, |m| m + 1);
    let mut count = vec![0usize; arena];

    let location = |id: NodeId| -> Result<&Vec<f64>> {
        tree.node(id).location.as_ref().ok_or(Error::MissingLocation(id))
    };
    let inserted_children = |id: NodeId, count: &[usize]| -> Vec<NodeId> {
        tree.node(id)
            .children
            .iter()
            .copied()
            .filter(|c| count[c.index()] > 0)
            .collect()
    };

    let mut total = 0.0;
    for (step, &leaf_ix) in ordering.iter().enumerate() {
        let leaf = tree.leaf_by_index(leaf_ix)?;
        let x_leaf = location(leaf)?;
        let path = tree.path_from_root(leaf);
        if step == 0 {
            let origin = vec![0.0; tree.dim()];
            total += log_normal_pdf_vec(x_leaf, &origin, hyper.sigma2);
        } else {
            // the new point leaves the inserted set at the deepest path node
            // that previously inserted points passed through
            let d_pos = (0..path.len())
                .rev()
                .find(|&j| count[path[j].index()] > 0)
                .expect("root always has inserted points");
            let mut t_seg = 0.0;
            let mut seg_node = tree.root();
            for j in 1..=d_pos {
                let v = path[j];
                let cnt_v = count[v.index()];
                let ins = inserted_children(v, &count);
                let is_partial_bp = ins.len() >= 2;
                if j < d_pos {
                    if is_partial_bp {
                        let t_v = tree.node(v).time;
                        total += (div.cumulative(t_seg) - div.cumulative(t_v))
                            * log_count_damping(cnt_v, alpha, beta).exp();
                        let cnt_next = count[path[j + 1].index()];
                        total += (cnt_next as f64 - beta).ln()
                            - (cnt_v as f64 + alpha).ln();
                        t_seg = t_v;
                        seg_node = v;
                    }
                    continue;
                }
                // j == d_pos: the divergence event
                let t_d = tree.node(v).time;
                let x_d = location(v)?;
                total += (div.cumulative(t_seg) - div.cumulative(t_d))
                    * log_count_damping(cnt_v, alpha, beta).exp();
                if is_partial_bp {
                    // widen an existing branch point
                    total += (alpha + beta * ins.len() as f64).ln()
                        - (cnt_v as f64 + alpha).ln();
                } else {
                    // diverge in the middle of an existing segment; the new
                    // node's location is a Brownian bridge draw between the
                    // segment endpoints
                    total += div.rate(t_d).ln() + log_count_damping(cnt_v, alpha, beta);
                    let mut lower = ins[0];
                    loop {
                        let li = inserted_children(lower, &count);
                        if tree.node(lower).is_leaf() || li.len() >= 2 {
                            break;
                        }
                        lower = li[0];
                    }
                    let t_a = t_seg;
                    let t_b = tree.node(lower).time;
                    let x_a = location(seg_node)?;
                    let x_b = location(lower)?;
                    let w = (t_d - t_a) / (t_b - t_a);
                    let bridge_var = hyper.sigma2 * (t_d - t_a) * (t_b - t_d) / (t_b - t_a);
                    for dim in 0..tree.dim() {
                        let mean = x_a[dim] + w * (x_b[dim] - x_a[dim]);
                        total += log_normal_pdf(x_d[dim], mean, bridge_var);
                    }
                }
                total += log_normal_pdf_vec(x_leaf, x_d, hyper.sigma2 * (1.0 - t_d));
            }
        }
        for v in &path {
            count[v.index()] += 1;
        }
    }
    Ok(total)
}
