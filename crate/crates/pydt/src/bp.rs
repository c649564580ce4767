//! Gaussian message passing on the tree: marginal likelihood with internal
//! locations integrated out, posterior marginals, joint backward sampling,
//! and local attachment scores.
//!
//! Messages are carried per dimension in natural parameters. Exact
//! observations and the pinned root travel as point masses rather than
//! infinite precisions.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::DataSet;
use crate::error::{Error, Result};
use crate::tree::{Attachment, NodeId, Tree};

/// A Gaussian site in natural parameters with an explicit log scale:
/// `exp(log_scale + lin * x - prec * x^2 / 2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteMsg {
    pub log_scale: f64,
    pub prec: f64,
    pub lin: f64,
}

impl SiteMsg {
    pub fn uniform() -> Self {
        Self {
            log_scale: 0.0,
            prec: 0.0,
            lin: 0.0,
        }
    }

    pub fn from_moments(log_scale: f64, mean: f64, var: f64) -> Self {
        Self {
            log_scale,
            prec: 1.0 / var,
            lin: mean / var,
        }
    }
}

/// Per-leaf observation message.
#[derive(Debug, Clone)]
pub enum LeafMessage {
    /// Exact observation per dimension.
    Point(Vec<f64>),
    /// Soft Gaussian site per dimension (used by the probit EP layer).
    Gaussian(Vec<SiteMsg>),
    /// Unobserved leaf.
    Missing,
}

/// Leaf messages keyed by leaf index.
#[derive(Debug, Clone)]
pub struct LeafMessages {
    msgs: Vec<LeafMessage>,
    dim: usize,
}

impl LeafMessages {
    pub fn point_mass(data: &DataSet) -> Self {
        Self {
            msgs: (0..data.n_rows())
                .map(|i| LeafMessage::Point(data.row(i).to_vec()))
                .collect(),
            dim: data.dim(),
        }
    }

    pub fn missing(n: usize, dim: usize) -> Self {
        Self {
            msgs: vec![LeafMessage::Missing; n],
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.msgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.msgs.is_empty()
    }

    pub fn get(&self, leaf_index: usize) -> &LeafMessage {
        &self.msgs[leaf_index]
    }

    pub fn set(&mut self, leaf_index: usize, msg: LeafMessage) {
        self.msgs[leaf_index] = msg;
    }
}

#[derive(Debug, Clone, Copy)]
enum Pot {
    /// exp(lin x - prec x^2 / 2); prec = lin = 0 is the uniform potential.
    Quad { prec: f64, lin: f64 },
    Point(f64),
}

#[derive(Debug, Clone, Copy)]
struct Msg {
    ls: f64,
    pot: Pot,
}

impl Msg {
    fn uniform() -> Self {
        Msg {
            ls: 0.0,
            pot: Pot::Quad { prec: 0.0, lin: 0.0 },
        }
    }

    fn point(ls: f64, x: f64) -> Self {
        Msg {
            ls,
            pot: Pot::Point(x),
        }
    }

    fn from_site(site: &SiteMsg) -> Self {
        Msg {
            ls: site.log_scale,
            pot: Pot::Quad {
                prec: site.prec,
                lin: site.lin,
            },
        }
    }

    /// Marginalize through a Gaussian edge factor with variance `s`.
    fn propagate(&self, s: f64) -> Msg {
        match self.pot {
            Pot::Point(mu) => Msg {
                ls: self.ls - mu * mu / (2.0 * s)
                    - 0.5 * (2.0 * std::f64::consts::PI * s).ln(),
                pot: Pot::Quad {
                    prec: 1.0 / s,
                    lin: mu / s,
                },
            },
            Pot::Quad { prec, lin } => {
                let denom = 1.0 + s * prec;
                Msg {
                    ls: self.ls + s * lin * lin / (2.0 * denom) - 0.5 * denom.ln(),
                    pot: Pot::Quad {
                        prec: prec / denom,
                        lin: lin / denom,
                    },
                }
            }
        }
    }

    fn multiply(&self, other: &Msg) -> Msg {
        match (self.pot, other.pot) {
            (Pot::Quad { prec: pa, lin: la }, Pot::Quad { prec: pb, lin: lb }) => Msg {
                ls: self.ls + other.ls,
                pot: Pot::Quad {
                    prec: pa + pb,
                    lin: la + lb,
                },
            },
            (Pot::Point(mu), Pot::Quad { prec, lin }) => Msg {
                ls: self.ls + other.ls + lin * mu - prec * mu * mu / 2.0,
                pot: Pot::Point(mu),
            },
            (Pot::Quad { prec, lin }, Pot::Point(mu)) => Msg {
                ls: self.ls + other.ls + lin * mu - prec * mu * mu / 2.0,
                pot: Pot::Point(mu),
            },
            (Pot::Point(_), Pot::Point(_)) => {
                unreachable!("two point masses never meet at one node")
            }
        }
    }

    fn eval_log_at(&self, x: f64) -> f64 {
        match self.pot {
            Pot::Quad { prec, lin } => self.ls + lin * x - prec * x * x / 2.0,
            Pot::Point(mu) => {
                if mu == x {
                    self.ls
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Mean and variance; the potential must be proper.
    fn moments(&self) -> (f64, f64) {
        match self.pot {
            Pot::Point(mu) => (mu, 0.0),
            Pot::Quad { prec, lin } => {
                assert!(prec > 0.0, "improper potential has no moments");
                (lin / prec, 1.0 / prec)
            }
        }
    }
}

/// Log normalizer of a Gaussian density written as a quadratic potential.
fn log_norm(prec: f64, lin: f64) -> f64 {
    -lin * lin / (2.0 * prec) + 0.5 * (prec / (2.0 * std::f64::consts::PI)).ln()
}

/// Posterior moments of one node location in one dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marginal {
    pub mean: f64,
    pub var: f64,
}

/// Joint posterior moments of a (parent, child) location pair in one
/// dimension.
#[derive(Debug, Clone, Copy)]
pub struct EdgeMoments {
    pub mean_parent: f64,
    pub mean_child: f64,
    pub var_parent: f64,
    pub var_child: f64,
    pub cov: f64,
}

impl EdgeMoments {
    /// E[(x_child - x_parent)^2].
    pub fn expected_sq_diff(&self) -> f64 {
        let d = self.mean_child - self.mean_parent;
        d * d + self.var_child + self.var_parent - 2.0 * self.cov
    }
}

/// Message-passing engine bound to one tree snapshot. Any structural edit to
/// the tree invalidates the evaluator; build a fresh one.
pub struct Evaluator<'a> {
    tree: &'a Tree,
    sigma2: f64,
    dim: usize,
    /// subtree message at each node, before the parent edge
    up: Vec<Vec<Msg>>,
    /// subtree message propagated through the parent edge (at the parent)
    pup: Vec<Vec<Msg>>,
    /// rest-of-tree message at each node, through its parent edge
    down: Vec<Vec<Msg>>,
    has_down: bool,
    log_ml: f64,
}

fn leaf_up(msg: &LeafMessage, dim: usize, _id: NodeId) -> Result<Vec<Msg>> {
    Ok(match msg {
        LeafMessage::Point(x) => {
            if x.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: x.len(),
                });
            }
            x.iter().map(|&v| Msg::point(0.0, v)).collect()
        }
        LeafMessage::Gaussian(sites) => {
            if sites.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: sites.len(),
                });
            }
            sites.iter().map(Msg::from_site).collect()
        }
        LeafMessage::Missing => vec![Msg::uniform(); dim],
    })
}

impl<'a> Evaluator<'a> {
    pub fn new(tree: &'a Tree, sigma2: f64, leaves: &LeafMessages) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma2 = {sigma2}")));
        }
        let dim = tree.dim();
        let slots = tree
            .node_ids()
            .iter()
            .map(|i| i.index())
            .max()
            .map_or(1, |m| m + 1);
        let mut ev = Evaluator {
            tree,
            sigma2,
            dim,
            up: vec![Vec::new(); slots],
            pup: vec![Vec::new(); slots],
            down: vec![Vec::new(); slots],
            has_down: false,
            log_ml: 0.0,
        };
        ev.upward(leaves)?;
        Ok(ev)
    }

    fn edge_var(&self, child: NodeId) -> Result<f64> {
        let parent = self.tree.node(child).parent.expect("non-root");
        let dt = self.tree.node(child).time - self.tree.node(parent).time;
        if dt <= 0.0 {
            return Err(Error::DegenerateEdge(child));
        }
        Ok(self.sigma2 * dt)
    }

    fn upward(&mut self, leaves: &LeafMessages) -> Result<()> {
        let order = self.tree.preorder();
        for &id in order.iter().rev() {
            let node = self.tree.node(id);
            let up = if node.is_leaf() {
                let ix = node.leaf_index.expect("leaf index");
                if ix >= leaves.len() {
                    return Err(Error::UnknownLeaf(ix));
                }
                leaf_up(leaves.get(ix), self.dim, id)?
            } else {
                let mut acc = vec![Msg::uniform(); self.dim];
                for &c in &node.children {
                    for d in 0..self.dim {
                        acc[d] = acc[d].multiply(&self.pup[c.index()][d]);
                    }
                }
                acc
            };
            if let Some(_) = node.parent {
                let s = self.edge_var(id)?;
                self.pup[id.index()] = up.iter().map(|m| m.propagate(s)).collect();
            }
            self.up[id.index()] = up;
        }
        // evidence: the root is pinned at the origin
        let root = self.tree.root();
        self.log_ml = match self.tree.node(root).children.first() {
            Some(&c) => (0..self.dim)
                .map(|d| self.pup[c.index()][d].eval_log_at(0.0))
                .sum(),
            None => 0.0,
        };
        Ok(())
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_ml
    }

    pub fn ensure_downward(&mut self) {
        if self.has_down {
            return;
        }
        let order = self.tree.preorder();
        for &id in &order {
            let node = self.tree.node(id);
            if node.is_root() {
                self.down[id.index()] = vec![Msg::point(0.0, 0.0); self.dim];
            }
            for (ci, &c) in node.children.iter().enumerate() {
                let mut ctx = self.down[id.index()].clone();
                for (cj, &o) in node.children.iter().enumerate() {
                    if ci == cj {
                        continue;
                    }
                    for d in 0..self.dim {
                        ctx[d] = ctx[d].multiply(&self.pup[o.index()][d]);
                    }
                }
                let s = self.edge_var(c).expect("validated in upward pass");
                self.down[c.index()] = ctx.iter().map(|m| m.propagate(s)).collect();
            }
        }
        self.has_down = true;
    }

    /// Rest-of-tree message at the parent of `child`, excluding the subtree
    /// below `child`; expressed at the parent's location.
    fn context_at_parent(&self, child: NodeId) -> Vec<Msg> {
        let parent = self.tree.node(child).parent.expect("non-root");
        let mut ctx = self.down[parent.index()].clone();
        for &o in &self.tree.node(parent).children {
            if o == child {
                continue;
            }
            for d in 0..self.dim {
                ctx[d] = ctx[d].multiply(&self.pup[o.index()][d]);
            }
        }
        ctx
    }

    /// Posterior mean and variance of the location of `id`, per dimension.
    pub fn marginal(&mut self, id: NodeId) -> Vec<Marginal> {
        self.ensure_downward();
        let node = self.tree.node(id);
        let mut belief = self.down[id.index()].clone();
        if !node.is_leaf() {
            for &c in &node.children {
                for d in 0..self.dim {
                    belief[d] = belief[d].multiply(&self.pup[c.index()][d]);
                }
            }
        } else {
            for d in 0..self.dim {
                belief[d] = belief[d].multiply(&self.up[id.index()][d]);
            }
        }
        belief
            .iter()
            .map(|m| {
                let (mean, var) = m.moments();
                Marginal { mean, var }
            })
            .collect()
    }

    /// Posterior marginals for every node, in preorder.
    pub fn marginals(&mut self) -> Vec<(NodeId, Vec<Marginal>)> {
        self.tree
            .preorder()
            .into_iter()
            .map(|id| {
                let m = self.marginal(id);
                (id, m)
            })
            .collect()
    }

    /// Joint posterior moments of (parent, child) locations for the edge
    /// above `child`.
    pub fn edge_moments(&mut self, child: NodeId) -> Result<Vec<EdgeMoments>> {
        self.ensure_downward();
        let s = self.edge_var(child)?;
        let ctx = self.context_at_parent(child);
        let mut out = Vec::with_capacity(self.dim);
        for d in 0..self.dim {
            let lower = self.up[child.index()][d];
            out.push(pair_moments(&ctx[d], &lower, s));
        }
        Ok(out)
    }

    /// Exact posterior marginal of the location at interior time `t` on the
    /// edge above `child`.
    pub fn point_posterior(&mut self, child: NodeId, t: f64) -> Result<Vec<Marginal>> {
        self.ensure_downward();
        let parent = self.tree.node(child).parent.expect("non-root");
        let (tp, tc) = (self.tree.node(parent).time, self.tree.node(child).time);
        if !(t > tp && t < tc) {
            return Err(Error::InvalidArgument(format!(
                "interior time {t} outside edge interval ({tp}, {tc})"
            )));
        }
        let ctx = self.context_at_parent(child);
        let mut out = Vec::with_capacity(self.dim);
        for d in 0..self.dim {
            let fwd = ctx[d].propagate(self.sigma2 * (t - tp));
            let bwd = self.up[child.index()][d].propagate(self.sigma2 * (tc - t));
            let (mean, var) = fwd.multiply(&bwd).moments();
            out.push(Marginal { mean, var });
        }
        Ok(out)
    }

    /// Change in log marginal likelihood from attaching a subtree, summarized
    /// by its per-dimension upward message `sub_msg` at its root time
    /// `t_sub`. O(D) given the cached sweeps.
    pub fn attach_score(
        &mut self,
        at: &Attachment,
        sub_msg: &[SiteMsg],
        t_sub: f64,
    ) -> Result<f64> {
        if sub_msg.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: sub_msg.len(),
            });
        }
        let (q, t_att) = match *at {
            Attachment::FirstChild => {
                return Err(Error::InvalidArgument(
                    "attach score on an empty tree is the subtree evidence".into(),
                ))
            }
            Attachment::OnEdge { child, time } => (self.point_posterior(child, time)?, time),
            Attachment::AtNode { node } => {
                if !self.tree.node(node).is_internal() {
                    return Err(Error::InvalidArgument(
                        "attachment target must be a branch point".into(),
                    ));
                }
                (self.marginal(node), self.tree.node(node).time)
            }
        };
        if t_sub <= t_att {
            return Err(Error::InvalidArgument(format!(
                "subtree root time {t_sub} not after attach time {t_att}"
            )));
        }
        let mut delta = 0.0;
        for d in 0..self.dim {
            let m = Msg::from_site_checked(&sub_msg[d]).propagate(self.sigma2 * (t_sub - t_att));
            let Pot::Quad { prec, lin } = m.pot else {
                unreachable!("propagation always yields a quadratic")
            };
            let (mu, v) = (q[d].mean, q[d].var);
            if v == 0.0 {
                delta += m.ls + lin * mu - prec * mu * mu / 2.0;
            } else {
                let (b, a) = (1.0 / v, mu / v);
                delta += m.ls + log_norm(b, a) - log_norm(b + prec, a + lin);
            }
        }
        Ok(delta)
    }

    /// Draw one exact joint sample of all node locations from the posterior.
    /// Returned in preorder; exact observations come back as themselves.
    pub fn sample_locations<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
    ) -> Vec<(NodeId, Vec<f64>)> {
        let order = self.tree.preorder();
        let slots = self.up.len();
        let mut drawn: Vec<Vec<f64>> = vec![Vec::new(); slots];
        let mut out = Vec::with_capacity(order.len());
        for &id in &order {
            let node = self.tree.node(id);
            let x = if node.is_root() {
                vec![0.0; self.dim]
            } else {
                let parent = node.parent.unwrap();
                let s = self.edge_var(id).expect("validated");
                let px = drawn[parent.index()].clone();
                (0..self.dim)
                    .map(|d| {
                        let local = if node.is_leaf() {
                            self.up[id.index()][d]
                        } else {
                            let mut acc = Msg::uniform();
                            for &c in &node.children {
                                acc = acc.multiply(&self.pup[c.index()][d]);
                            }
                            acc
                        };
                        match local.pot {
                            Pot::Point(mu) => mu,
                            Pot::Quad { prec, lin } => {
                                let post_prec = prec + 1.0 / s;
                                let post_mean = (lin + px[d] / s) / post_prec;
                                post_mean
                                    + rng.sample::<f64, _>(StandardNormal)
                                        / post_prec.sqrt()
                            }
                        }
                    })
                    .collect()
            };
            drawn[id.index()] = x.clone();
            out.push((id, x));
        }
        out
    }
}

fn pair_moments(ctx: &Msg, lower: &Msg, s: f64) -> EdgeMoments {
    match (ctx.pot, lower.pot) {
        (Pot::Point(a), Pot::Point(b)) => EdgeMoments {
            mean_parent: a,
            mean_child: b,
            var_parent: 0.0,
            var_child: 0.0,
            cov: 0.0,
        },
        (Pot::Point(a), Pot::Quad { prec, lin }) => {
            let post_prec = prec + 1.0 / s;
            let mean = (lin + a / s) / post_prec;
            EdgeMoments {
                mean_parent: a,
                mean_child: mean,
                var_parent: 0.0,
                var_child: 1.0 / post_prec,
                cov: 0.0,
            }
        }
        (Pot::Quad { prec, lin }, Pot::Point(b)) => {
            let post_prec = prec + 1.0 / s;
            let mean = (lin + b / s) / post_prec;
            EdgeMoments {
                mean_parent: mean,
                mean_child: b,
                var_parent: 1.0 / post_prec,
                var_child: 0.0,
                cov: 0.0,
            }
        }
        (Pot::Quad { prec: pa, lin: la }, Pot::Quad { prec: pb, lin: lb }) => {
            let (qa, qb, qc) = (pa + 1.0 / s, pb + 1.0 / s, -1.0 / s);
            let det = qa * qb - qc * qc;
            let (spp, svv, spv) = (qb / det, qa / det, -qc / det);
            EdgeMoments {
                mean_parent: spp * la + spv * lb,
                mean_child: spv * la + svv * lb,
                var_parent: spp,
                var_child: svv,
                cov: spv,
            }
        }
    }
}

/// Log marginal likelihood of the leaf messages under the tree, with all
/// internal locations integrated out.
pub fn marginal_likelihood(tree: &Tree, sigma2: f64, leaves: &LeafMessages) -> Result<f64> {
    Ok(Evaluator::new(tree, sigma2, leaves)?.log_marginal())
}

/// Upward message of a detached subtree at its root (before any parent
/// edge), one site per dimension.
pub fn subtree_root_message(
    tree: &Tree,
    sub_root: NodeId,
    sigma2: f64,
    leaves: &LeafMessages,
) -> Result<Vec<SiteMsg>> {
    let dim = tree.dim();
    let order = tree.preorder_from(sub_root);
    let slots = tree
        .node_ids()
        .iter()
        .map(|i| i.index())
        .max()
        .map_or(1, |m| m + 1);
    let mut pup: Vec<Vec<Msg>> = vec![Vec::new(); slots];
    let mut result = vec![Msg::uniform(); dim];
    for &id in order.iter().rev() {
        let node = tree.node(id);
        let up = if node.is_leaf() {
            let ix = node.leaf_index.expect("leaf index");
            leaf_up(leaves.get(ix), dim, id)?
        } else {
            let mut acc = vec![Msg::uniform(); dim];
            for &c in &node.children {
                for d in 0..dim {
                    acc[d] = acc[d].multiply(&pup[c.index()][d]);
                }
            }
            acc
        };
        if id == sub_root {
            result = up;
            break;
        }
        let parent = node.parent.expect("subtree interior");
        let dt = node.time - tree.node(parent).time;
        if dt <= 0.0 {
            return Err(Error::DegenerateEdge(id));
        }
        pup[id.index()] = up.iter().map(|m| m.propagate(sigma2 * dt)).collect();
    }
    Ok(result
        .iter()
        .map(|m| match m.pot {
            Pot::Quad { prec, lin } => SiteMsg {
                log_scale: m.ls,
                prec,
                lin,
            },
            Pot::Point(mu) => {
                // a bare leaf: represent the exact observation as a spike;
                // callers propagate it through a positive-duration edge first,
                // which restores a proper Gaussian
                SiteMsg {
                    log_scale: m.ls,
                    prec: f64::INFINITY,
                    lin: mu,
                }
            }
        })
        .collect())
}

/// Propagation-safe handling for point-mass subtree messages is easier in
/// message space; re-wrap a site that may carry an exact spike.
impl Msg {
    fn from_site_checked(site: &SiteMsg) -> Msg {
        if site.prec.is_infinite() {
            Msg::point(site.log_scale, site.lin)
        } else {
            Msg::from_site(site)
        }
    }
}
