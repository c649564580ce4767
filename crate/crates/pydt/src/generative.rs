//! Forward simulation: grow a tree one point at a time and diffuse locations.
//!
//! The attachment walk doubles as the MCMC reattachment proposal, so it is
//! exposed separately from `add_point` together with its exact log density.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::divergence::{
    log_count_damping, sample_branch_choice, sample_divergence_time, DivergenceFn,
    ReciprocalDivergence,
};
use crate::error::{Error, Result};
use crate::hyper::Hyperparams;
use crate::tree::{Attachment, NodeId, Tree};

/// Walk the existing tree as a new point would, returning where it diverges.
/// Only attachments with divergence time strictly below `max_time` are
/// returned; later divergences restart the walk. For new leaves use
/// `max_time = 1.0`.
pub fn sample_attachment<R: Rng + ?Sized>(
    tree: &Tree,
    max_time: f64,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<Attachment> {
    let root = tree.root();
    if tree.node(root).children.is_empty() {
        return Ok(Attachment::FirstChild);
    }
    let div = ReciprocalDivergence { c: hyper.c };
    // the walk restarts when it lands past max_time; each pass has positive
    // probability of success, but guard against pathological settings
    for _ in 0..1_000_000 {
        if let Some(att) = walk_once(tree, max_time, hyper, &div, rng)? {
            return Ok(att);
        }
    }
    Err(Error::Numerical(
        "attachment walk failed to land before the subtree's root time".into(),
    ))
}

fn walk_once<R: Rng + ?Sized>(
    tree: &Tree,
    max_time: f64,
    hyper: &Hyperparams,
    div: &ReciprocalDivergence,
    rng: &mut R,
) -> Result<Option<Attachment>> {
    let mut parent = tree.root();
    let mut child = tree.node(parent).children[0];
    loop {
        let t_parent = tree.node(parent).time;
        let t_child = tree.node(child).time;
        let m = tree.node(child).leaf_count;
        let t_div = sample_divergence_time(div, t_parent, m, hyper.alpha, hyper.beta, rng)?
            .unwrap_or(f64::INFINITY);
        if t_div < t_child {
            // diverged on this edge; a draw clamped onto the parent time has
            // no representable interior point, so walk again
            if t_div <= t_parent || t_div >= max_time {
                return Ok(None);
            }
            return Ok(Some(Attachment::OnEdge {
                child,
                time: t_div,
            }));
        }
        // reached the child; leaves force divergence on their edge, so a
        // clamped draw can only mean "walk again"
        if tree.node(child).is_leaf() {
            return Ok(None);
        }
        let counts = tree.child_counts(child);
        let pick = sample_branch_choice(&counts, hyper.alpha, hyper.beta, rng)?;
        if pick == counts.len() {
            // new branch at this branch point
            if t_child >= max_time {
                return Ok(None);
            }
            return Ok(Some(Attachment::AtNode { node: child }));
        }
        parent = child;
        child = tree.node(child).children[pick];
    }
}

/// Log density (or mass, for branch-point attachments) of the walk producing
/// `attachment` on `tree`, without the `max_time` conditioning constant.
pub fn walk_log_density(tree: &Tree, attachment: &Attachment, hyper: &Hyperparams) -> Result<f64> {
    let div = ReciprocalDivergence { c: hyper.c };
    let (target_child, stop_time, at_node) = match *attachment {
        Attachment::FirstChild => return Ok(0.0),
        Attachment::OnEdge { child, time } => (child, time, false),
        Attachment::AtNode { node } => (node, tree.node(node).time, true),
    };
    let path = tree.path_from_root(target_child);
    let mut log_p = 0.0;
    for w in path.windows(2) {
        let (a, b) = (w[0], w[1]);
        let t_a = tree.node(a).time;
        let t_b = tree.node(b).time;
        let m = tree.node(b).leaf_count;
        let damping = log_count_damping(m, hyper.alpha, hyper.beta).exp();
        if b == target_child && !at_node {
            // survive to the divergence time, then diverge
            log_p += (div.cumulative(t_a) - div.cumulative(stop_time)) * damping;
            log_p += div.rate(stop_time).ln() + log_count_damping(m, hyper.alpha, hyper.beta);
            return Ok(log_p);
        }
        // survive the whole edge
        log_p += (div.cumulative(t_a) - div.cumulative(t_b)) * damping;
        if b == target_child {
            // new branch at this node
            let counts = tree.child_counts(b);
            let k = counts.len() as f64;
            let m_b: usize = counts.iter().sum();
            log_p += (hyper.alpha + hyper.beta * k).ln()
                - (m_b as f64 + hyper.alpha).ln();
            return Ok(log_p);
        }
        // choose the branch continuing the path
        if tree.node(b).is_internal() {
            let next = path[path.iter().position(|&x| x == b).unwrap() + 1];
            let counts = tree.child_counts(b);
            let pick = tree
                .node(b)
                .children
                .iter()
                .position(|&c| c == next)
                .expect("path child");
            let m_b: usize = counts.iter().sum();
            log_p += (counts[pick] as f64 - hyper.beta).ln()
                - (m_b as f64 + hyper.alpha).ln();
        }
    }
    Err(Error::InvalidArgument(
        "attachment target not reachable from the root".into(),
    ))
}

/// Insert one new data point into the tree: run the walk and attach a fresh
/// leaf where it diverges. Structure and times only.
pub fn add_point<R: Rng + ?Sized>(
    tree: &mut Tree,
    leaf_index: usize,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<NodeId> {
    let attachment = sample_attachment(tree, 1.0, hyper, rng)?;
    let leaf = tree.new_leaf(leaf_index);
    tree.attach_subtree(leaf, &attachment)?;
    Ok(leaf)
}

/// Diffuse locations forward through the tree: the root sits at the origin
/// and every node is Gaussian around its parent with variance
/// `sigma2 * (t_child - t_parent)` per dimension.
pub fn sample_locations_forward<R: Rng + ?Sized>(
    tree: &mut Tree,
    sigma2: f64,
    rng: &mut R,
) -> Result<()> {
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 = {sigma2}")));
    }
    let dim = tree.dim();
    let order = tree.preorder();
    tree.node_mut(tree.root()).location = Some(vec![0.0; dim]);
    for &id in order.iter().skip(1) {
        let parent = tree.node(id).parent.expect("non-root node");
        let dt = tree.node(id).time - tree.node(parent).time;
        if dt <= 0.0 {
            return Err(Error::DegenerateEdge(id));
        }
        let sd = (sigma2 * dt).sqrt();
        let base = tree.node(parent).location.clone().expect("parent visited");
        let loc: Vec<f64> = base
            .iter()
            .map(|&x| x + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        tree.node_mut(id).location = Some(loc);
    }
    Ok(())
}

/// Sample a complete tree over `n` points in `dim` dimensions: grow the
/// structure point by point, then diffuse locations.
pub fn sample_tree<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<Tree> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one point".into()));
    }
    let mut tree = Tree::new(dim);
    for i in 0..n {
        add_point(&mut tree, i, hyper, rng)?;
    }
    sample_locations_forward(&mut tree, hyper.sigma2, rng)?;
    Ok(tree)
}

/// Sample structure and times only (locations left empty).
pub fn sample_structure<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<Tree> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one point".into()));
    }
    let mut tree = Tree::new(dim);
    for i in 0..n {
        add_point(&mut tree, i, hyper, rng)?;
    }
    Ok(tree)
}
