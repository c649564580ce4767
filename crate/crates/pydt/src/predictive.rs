//! Predictive density of a new point under a fitted tree: the generative
//! walk's outcomes enumerated into a weighted mixture of diagonal Gaussians.

use rand::Rng;

use crate::bp::Evaluator;
use crate::divergence::{log_count_damping, DivergenceFn, ReciprocalDivergence};
use crate::error::{Error, Result};
use crate::hyper::Hyperparams;
use crate::tree::{NodeId, Tree};

/// Where a mixture component came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentOrigin {
    /// Divergence on the edge above this node.
    Edge(NodeId),
    /// Divergence at this existing branch point.
    Node(NodeId),
}

#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub origin: ComponentOrigin,
}

/// Weighted mixture of axis-aligned Gaussians.
#[derive(Debug, Clone)]
pub struct MixtureDensity {
    components: Vec<MixtureComponent>,
    dim: usize,
}

impl MixtureDensity {
    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    /// Log density at a point.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let mut terms = Vec::with_capacity(self.components.len());
        for comp in &self.components {
            if comp.weight <= 0.0 {
                continue;
            }
            let mut lp = comp.weight.ln();
            for d in 0..self.dim {
                lp += crate::density::log_normal_pdf(x[d], comp.mean[d], comp.var[d]);
            }
            terms.push(lp);
        }
        Ok(log_sum_exp(&terms))
    }

    /// Draw a point from the mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut u = rng.gen::<f64>() * self.total_weight();
        let mut chosen = self.components.last().expect("non-empty mixture");
        for comp in &self.components {
            u -= comp.weight;
            if u <= 0.0 {
                chosen = comp;
                break;
            }
        }
        (0..self.dim)
            .map(|d| {
                chosen.mean[d]
                    + chosen.var[d].sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal)
            })
            .collect()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Enumerate the generative walk over a fitted tree into a predictive
/// mixture. Divergence times on each edge are drawn from the walk's
/// truncated divergence density (`n_time_samples` draws, equally weighted);
/// branch-point atoms contribute one component each.
pub fn predictive_mixture<R: Rng + ?Sized>(
    tree: &Tree,
    hyper: &Hyperparams,
    ev: &mut Evaluator<'_>,
    n_time_samples: usize,
    rng: &mut R,
) -> Result<MixtureDensity> {
    if n_time_samples == 0 {
        return Err(Error::InvalidArgument("need at least one time sample".into()));
    }
    let root = tree.root();
    let first = *tree
        .node(root)
        .children
        .first()
        .ok_or_else(|| Error::InvalidTree("empty tree".into()))?;
    let div = ReciprocalDivergence { c: hyper.c };
    let dim = tree.dim();
    let mut components = Vec::new();
    // stack of (edge child, probability mass entering that edge)
    let mut stack = vec![(first, 1.0f64)];
    while let Some((child, mass)) = stack.pop() {
        let node = tree.node(child);
        let parent = node.parent.expect("non-root");
        let (tp, tc) = (tree.node(parent).time, node.time);
        let m = node.leaf_count;
        let damp = log_count_damping(m, hyper.alpha, hyper.beta).exp();
        let survival = if node.is_leaf() {
            0.0
        } else {
            ((div.cumulative(tp) - div.cumulative(tc)) * damp).exp()
        };
        let edge_mass = mass * (1.0 - survival);
        if edge_mass > 0.0 {
            let span = tc - tp;
            for _ in 0..n_time_samples {
                let u = rng.gen::<f64>();
                let w = 1.0 - u * (1.0 - survival);
                let a_t = div.cumulative(tp) - w.ln() / damp;
                let t = div
                    .inverse_cumulative(a_t)
                    .clamp(tp + 1e-12 * span, tc - 1e-12 * span);
                let q = ev.point_posterior(child, t)?;
                components.push(MixtureComponent {
                    weight: edge_mass / n_time_samples as f64,
                    mean: q.iter().map(|m| m.mean).collect(),
                    var: q
                        .iter()
                        .map(|m| m.var + hyper.sigma2 * (1.0 - t))
                        .collect(),
                    origin: ComponentOrigin::Edge(child),
                });
            }
        }
        if node.is_leaf() {
            continue;
        }
        let through = mass * survival;
        let counts = tree.child_counts(child);
        let k = counts.len() as f64;
        let total = m as f64 + hyper.alpha;
        let atom = (hyper.alpha + hyper.beta * k) / total;
        if atom > 0.0 {
            let q = ev.marginal(child);
            components.push(MixtureComponent {
                weight: through * atom,
                mean: q.iter().map(|m| m.mean).collect(),
                var: q
                    .iter()
                    .map(|m| m.var + hyper.sigma2 * (1.0 - tc))
                    .collect(),
                origin: ComponentOrigin::Node(child),
            });
        }
        for (i, &c) in node.children.iter().enumerate() {
            let p = (counts[i] as f64 - hyper.beta) / total;
            stack.push((c, through * p));
        }
    }
    // the walk outcomes are exhaustive; renormalize away summation rounding
    let total: f64 = components.iter().map(|c| c.weight).sum();
    debug_assert!((total - 1.0).abs() < 1e-9, "walk mass {total}");
    for c in components.iter_mut() {
        c.weight /= total;
    }
    Ok(MixtureDensity { components, dim })
}

/// Uniformly weighted collection of per-tree predictive mixtures.
#[derive(Debug, Clone)]
pub struct Ensemble {
    mixtures: Vec<MixtureDensity>,
    weights: Vec<f64>,
}

impl Ensemble {
    pub fn uniform(mixtures: Vec<MixtureDensity>) -> Result<Self> {
        if mixtures.is_empty() {
            return Err(Error::InvalidArgument("empty ensemble".into()));
        }
        let w = 1.0 / mixtures.len() as f64;
        let weights = vec![w; mixtures.len()];
        Ok(Self { mixtures, weights })
    }

    /// Weight members by normalized exponentiated scores instead of
    /// uniformly.
    pub fn score_weighted(mixtures: Vec<MixtureDensity>, scores: &[f64]) -> Result<Self> {
        if mixtures.is_empty() || mixtures.len() != scores.len() {
            return Err(Error::InvalidArgument(
                "ensemble and score lengths differ or are empty".into(),
            ));
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= z;
        }
        Ok(Self { mixtures, weights })
    }

    pub fn len(&self) -> usize {
        self.mixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixtures.is_empty()
    }

    /// Log predictive density averaged over the ensemble.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.mixtures.len());
        for (mix, w) in self.mixtures.iter().zip(&self.weights) {
            terms.push(w.ln() + mix.log_density(x)?);
        }
        Ok(log_sum_exp(&terms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bp::LeafMessages;
    use crate::data::DataSet;
    use crate::generative::{sample_attachment, sample_tree};
    use crate::test_support::simpson;
    use crate::tree::Attachment;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fitted_evaluator<'a>(
        tree: &'a Tree,
        data: &DataSet,
        sigma2: f64,
    ) -> (Evaluator<'a>, LeafMessages) {
        let lm = LeafMessages::point_mass(data);
        let ev = Evaluator::new(tree, sigma2, &lm).unwrap();
        (ev, lm)
    }

    #[test]
    fn single_point_mixture_is_exhaustive_and_normalized() {
        let mut tree = Tree::new(1);
        let l = tree.new_leaf(0);
        tree.attach_subtree(l, &Attachment::FirstChild).unwrap();
        let data = DataSet::from_rows(&[vec![0.8]]).unwrap();
        let hyper = Hyperparams::default();
        let (mut ev, _lm) = fitted_evaluator(&tree, &data, hyper.sigma2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mix = predictive_mixture(&tree, &hyper, &mut ev, 16, &mut rng).unwrap();
        assert_eq!(mix.components().len(), 16);
        assert!((mix.total_weight() - 1.0).abs() < 1e-12);
        // density integrates to one on the line
        let total = simpson(
            |x| mix.log_density(&[x]).unwrap().exp(),
            -12.0,
            12.0,
            4000,
        );
        assert!((total - 1.0).abs() < 1e-6, "integral {total}");
    }

    #[test]
    fn weights_sum_to_one_on_random_trees() {
        let hyper = Hyperparams::new(1.0, 1.0, 1.3, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let tree = sample_tree(8, 2, &hyper, &mut rng).unwrap();
            let data = tree.leaf_data().unwrap();
            let (mut ev, _lm) = fitted_evaluator(&tree, &data, hyper.sigma2);
            let mix = predictive_mixture(&tree, &hyper, &mut ev, 3, &mut rng).unwrap();
            assert!((mix.total_weight() - 1.0).abs() < 1e-12);
            assert!(mix.components().iter().all(|c| c.weight >= 0.0));
        }
    }

    #[test]
    fn atom_weights_match_walk_probabilities() {
        // hand-built tree: root -> a(0.5) with three leaf children
        let mut tree = Tree::new(1);
        let l0 = tree.new_leaf(0);
        tree.attach_subtree(l0, &Attachment::FirstChild).unwrap();
        let l1 = tree.new_leaf(1);
        tree.attach_subtree(l1, &Attachment::OnEdge { child: l0, time: 0.5 })
            .unwrap();
        let a = tree.node(l1).parent.unwrap();
        let l2 = tree.new_leaf(2);
        tree.attach_subtree(l2, &Attachment::AtNode { node: a }).unwrap();
        let hyper = Hyperparams::new(1.0, 1.0, 0.7, 0.2).unwrap();
        let data = DataSet::from_rows(&[vec![0.0], vec![1.0], vec![-1.0]]).unwrap();
        let (mut ev, _lm) = fitted_evaluator(&tree, &data, hyper.sigma2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mix = predictive_mixture(&tree, &hyper, &mut ev, 4, &mut rng).unwrap();
        let atom_w: f64 = mix
            .components()
            .iter()
            .filter(|c| c.origin == ComponentOrigin::Node(a))
            .map(|c| c.weight)
            .sum();
        // pass probability to the branch point times the widening atom
        let div = ReciprocalDivergence { c: hyper.c };
        let damp = log_count_damping(3, hyper.alpha, hyper.beta).exp();
        let pass = (-div.cumulative(0.5) * damp).exp();
        let expected = pass * (hyper.alpha + hyper.beta * 3.0) / (3.0 + hyper.alpha);
        assert!(
            (atom_w - expected).abs() < 1e-10,
            "atom weight {atom_w} vs {expected}"
        );
    }

    #[test]
    fn binary_case_has_no_atoms() {
        let hyper = Hyperparams::ddt(1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tree = sample_tree(6, 1, &hyper, &mut rng).unwrap();
        let data = tree.leaf_data().unwrap();
        let (mut ev, _lm) = fitted_evaluator(&tree, &data, hyper.sigma2);
        let mix = predictive_mixture(&tree, &hyper, &mut ev, 3, &mut rng).unwrap();
        assert!(mix
            .components()
            .iter()
            .all(|c| matches!(c.origin, ComponentOrigin::Edge(_))));
    }

    #[test]
    fn mixture_matches_monte_carlo_predictive() {
        // simulate the exact predictive by sampling posterior locations and
        // walking the generative process; compare binned masses
        let hyper = Hyperparams::new(1.0, 0.7, 0.8, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tree = sample_tree(5, 1, &hyper, &mut rng).unwrap();
        let data = tree.leaf_data().unwrap();
        let (mut ev, _lm) = fitted_evaluator(&tree, &data, hyper.sigma2);
        let mix = predictive_mixture(&tree, &hyper, &mut ev, 128, &mut rng).unwrap();

        let slots = tree
            .node_ids()
            .iter()
            .map(|i| i.index())
            .max()
            .unwrap()
            + 1;
        let runs = 1_000_000;
        let lo = -4.0;
        let hi = 4.0;
        let bins = 16;
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        let mut kept = 0usize;
        for _ in 0..runs {
            let locs = ev.sample_locations(&mut rng);
            let mut by_slot = vec![0.0f64; slots];
            for (id, x) in &locs {
                by_slot[id.index()] = x[0];
            }
            let at = sample_attachment(&tree, 1.0, &hyper, &mut rng).unwrap();
            let (t_div, x_div) = match at {
                Attachment::OnEdge { child, time } => {
                    let parent = tree.node(child).parent.unwrap();
                    let (tp, tc) = (tree.node(parent).time, tree.node(child).time);
                    let (xp, xc) = (by_slot[parent.index()], by_slot[child.index()]);
                    let w = (time - tp) / (tc - tp);
                    let bridge_var = hyper.sigma2 * (time - tp) * (tc - time) / (tc - tp);
                    let mean = xp + w * (xc - xp);
                    (
                        time,
                        mean + bridge_var.sqrt()
                            * rng.sample::<f64, _>(rand_distr::StandardNormal),
                    )
                }
                Attachment::AtNode { node } => (tree.node(node).time, by_slot[node.index()]),
                Attachment::FirstChild => unreachable!(),
            };
            let x_new = x_div
                + (hyper.sigma2 * (1.0 - t_div)).sqrt()
                    * rng.sample::<f64, _>(rand_distr::StandardNormal);
            if x_new >= lo && x_new < hi {
                let b = ((x_new - lo) / width) as usize;
                counts[b.min(bins - 1)] += 1;
                kept += 1;
            }
        }
        let _ = kept;
        for b in 0..bins {
            let center = lo + (b as f64 + 0.5) * width;
            let mc = counts[b] as f64 / runs as f64;
            let model = simpson(
                |x| mix.log_density(&[x]).unwrap().exp(),
                center - width / 2.0,
                center + width / 2.0,
                16,
            );
            if model > 0.025 {
                let rel = (mc - model).abs() / model;
                assert!(
                    rel < 0.05,
                    "bin {b} at {center}: MC {mc:.4} vs mixture {model:.4}"
                );
            }
        }
    }

    #[test]
    fn discretization_is_stable_in_time_samples() {
        let hyper = Hyperparams::new(1.0, 1.0, 0.5, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let tree = sample_tree(6, 2, &hyper, &mut rng).unwrap();
        let data = tree.leaf_data().unwrap();
        let (mut ev, _lm) = fitted_evaluator(&tree, &data, hyper.sigma2);
        let mix3 = predictive_mixture(&tree, &hyper, &mut ev, 3, &mut rng).unwrap();
        let mix30 = predictive_mixture(&tree, &hyper, &mut ev, 30, &mut rng).unwrap();
        // held-out probe points; training rows sit under density spikes from
        // late divergence on their own edge
        let probes: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let a = i as f64 / 40.0 * std::f64::consts::TAU;
                vec![1.8 * a.cos(), 1.8 * a.sin()]
            })
            .collect();
        let mut total3 = 0.0;
        let mut total30 = 0.0;
        for p in &probes {
            total3 += mix3.log_density(p).unwrap();
            total30 += mix30.log_density(p).unwrap();
        }
        let rel = (total3 - total30).abs() / total30.abs();
        println!("time-sample stability: 3 -> {total3:.4}, 30 -> {total30:.4} (rel {rel:.4})");
        assert!(rel < 0.05, "discretization unstable: {rel}");
    }

    #[test]
    fn ensemble_averages_and_integrates() {
        let hyper = Hyperparams::new(1.0, 1.0, 0.9, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut mixtures = Vec::new();
        let mut trees = Vec::new();
        for _ in 0..3 {
            let tree = sample_tree(5, 1, &hyper, &mut rng).unwrap();
            trees.push(tree);
        }
        for tree in &trees {
            let data = tree.leaf_data().unwrap();
            let lm = LeafMessages::point_mass(&data);
            let mut ev = Evaluator::new(tree, hyper.sigma2, &lm).unwrap();
            mixtures.push(predictive_mixture(tree, &hyper, &mut ev, 3, &mut rng).unwrap());
        }
        let single = Ensemble::uniform(vec![mixtures[0].clone()]).unwrap();
        assert!(
            (single.log_density(&[0.3]).unwrap() - mixtures[0].log_density(&[0.3]).unwrap())
                .abs()
                < 1e-12
        );
        let ens = Ensemble::uniform(mixtures).unwrap();
        // importance-sample the integral with a wide Gaussian proposal
        let (pm, pv): (f64, f64) = (0.0, 16.0);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x = pm + pv.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let logq = crate::density::log_normal_pdf(x, pm, pv);
            acc += (ens.log_density(&[x]).unwrap() - logq).exp();
        }
        let integral = acc / n as f64;
        assert!((integral - 1.0).abs() < 0.02, "integral {integral}");
        assert!(Ensemble::uniform(vec![]).is_err());
    }
}
