//! Probit observation model for binary data: closed-form tilted moments,
//! per-dimension expectation propagation at the leaves, and the auxiliary
//! slice update used by the collapsed sampler.

use rand::Rng;
use statrs::function::erf::erfc;

use crate::bp::{Evaluator, LeafMessage, LeafMessages, SiteMsg};
use crate::data::BinaryData;
use crate::error::{Error, Result};
use crate::slice::slice_sample;
use crate::tree::Tree;

const LN_SQRT_2PI: f64 = 0.918938533204672741780329736406;

fn log_normal_pdf_std(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// Log of the standard normal CDF, with an asymptotic expansion in the far
/// left tail where the erfc route underflows.
pub fn log_phi(z: f64) -> f64 {
    if z > -6.0 {
        (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        // Mills-ratio expansion: Phi(z) ~ phi(z)/(-z) (1 - 1/z^2 + 3/z^4 - ...)
        let zi = 1.0 / (z * z);
        let series = 1.0 - zi * (1.0 - 3.0 * zi * (1.0 - 5.0 * zi * (1.0 - 7.0 * zi)));
        log_normal_pdf_std(z) - (-z).ln() + series.ln()
    }
}

/// Moments of the tilted density N(x; mean, var) * Phi(sign * x) for a
/// binary observation: returns (log normalizer, tilted mean, tilted
/// variance).
pub fn probit_moments(mean: f64, var: f64, y: bool) -> Result<(f64, f64, f64)> {
    if !(var.is_finite() && var > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cavity variance {var} must be positive"
        )));
    }
    let sign = if y { 1.0 } else { -1.0 };
    let denom = (1.0 + var).sqrt();
    let z = sign * mean / denom;
    let log_z = log_phi(z);
    let ratio = (log_normal_pdf_std(z) - log_z).exp();
    let tilted_mean = mean + sign * var * ratio / denom;
    let tilted_var = var - var * var * ratio * (z + ratio) / (1.0 + var);
    Ok((log_z, tilted_mean, tilted_var.max(var * 1e-12)))
}

/// Slice-sample a leaf latent from N(x; mean, var) * Phi(sign * x).
pub fn aux_slice_update<R: Rng + ?Sized>(
    mean: f64,
    var: f64,
    y: bool,
    current: f64,
    rng: &mut R,
) -> f64 {
    let sign = if y { 1.0 } else { -1.0 };
    let mut log_f = |x: f64| -0.5 * (x - mean) * (x - mean) / var + log_phi(sign * x);
    slice_sample(current, var.sqrt(), &mut log_f, rng)
}

/// Converged EP approximation: Gaussian sites per (leaf, dimension) and the
/// implied evidence estimate.
#[derive(Debug, Clone)]
pub struct EpFit {
    pub leaves: LeafMessages,
    pub evidence: f64,
    pub sweeps: usize,
    pub skipped_updates: usize,
    pub converged: bool,
}

/// EP options; damping 0.5 is plenty for tree-structured models.
#[derive(Debug, Clone)]
pub struct EpOptions {
    pub damping: f64,
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for EpOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_sweeps: 50,
            tol: 1e-6,
        }
    }
}

fn log_norm(prec: f64, lin: f64) -> f64 {
    -lin * lin / (2.0 * prec) + 0.5 * (prec / (2.0 * std::f64::consts::PI)).ln()
}

/// Fit per-dimension probit sites at the leaves by sequential EP sweeps.
/// `order` overrides the leaf update order (used to check order
/// independence); missing cells keep an uninformative site.
pub fn ep_fit(
    tree: &Tree,
    sigma2: f64,
    y: &BinaryData,
    opts: &EpOptions,
    order: Option<&[usize]>,
    warm_start: Option<&LeafMessages>,
) -> Result<EpFit> {
    let n = y.n_rows();
    let dim = y.dim();
    if tree.n_leaves() != n {
        return Err(Error::InvalidArgument(format!(
            "tree has {} leaves for {} rows",
            tree.n_leaves(),
            n
        )));
    }
    let default_order: Vec<usize> = (0..n).collect();
    let order = order.unwrap_or(&default_order);

    let mut sites: Vec<Vec<SiteMsg>> = match warm_start {
        Some(lm) => (0..n)
            .map(|i| match lm.get(i) {
                LeafMessage::Gaussian(s) => s.clone(),
                _ => vec![SiteMsg::uniform(); dim],
            })
            .collect(),
        None => vec![vec![SiteMsg::uniform(); dim]; n],
    };
    let mut skipped = 0usize;
    let mut sweeps_done = 0usize;
    let mut converged = false;

    let leaf_messages = |sites: &[Vec<SiteMsg>]| -> LeafMessages {
        let mut lm = LeafMessages::missing(n, dim);
        for (i, s) in sites.iter().enumerate() {
            lm.set(i, LeafMessage::Gaussian(s.clone()));
        }
        lm
    };

    for sweep in 0..opts.max_sweeps {
        sweeps_done = sweep + 1;
        let mut max_delta: f64 = 0.0;
        for &i in order {
            let leaf = tree.leaf_by_index(i)?;
            let lm = leaf_messages(&sites);
            let mut ev = Evaluator::new(tree, sigma2, &lm)?;
            let belief = ev.marginal(leaf);
            for d in 0..dim {
                let Some(obs) = y.get(i, d) else { continue };
                let site = sites[i][d];
                let prec_b = 1.0 / belief[d].var;
                let lin_b = belief[d].mean / belief[d].var;
                let prec_c = prec_b - site.prec;
                let lin_c = lin_b - site.lin;
                if prec_c <= 1e-12 {
                    skipped += 1;
                    continue;
                }
                let (cav_mean, cav_var) = (lin_c / prec_c, 1.0 / prec_c);
                let (log_z, tm, tv) = probit_moments(cav_mean, cav_var, obs)?;
                let prec_new = 1.0 / tv - prec_c;
                let lin_new = tm / tv - lin_c;
                let ls_new = log_z + log_norm(1.0 / tv, tm / tv) - log_norm(prec_c, lin_c);
                let d_amt = opts.damping;
                let updated = SiteMsg {
                    prec: (1.0 - d_amt) * site.prec + d_amt * prec_new,
                    lin: (1.0 - d_amt) * site.lin + d_amt * lin_new,
                    log_scale: (1.0 - d_amt) * site.log_scale + d_amt * ls_new,
                };
                if prec_c + updated.prec <= 0.0 {
                    skipped += 1;
                    continue;
                }
                max_delta = max_delta
                    .max((updated.prec - site.prec).abs())
                    .max((updated.lin - site.lin).abs());
                sites[i][d] = updated;
            }
        }
        if max_delta < opts.tol {
            converged = true;
            break;
        }
    }

    let lm = leaf_messages(&sites);
    let evidence = crate::bp::marginal_likelihood(tree, sigma2, &lm)?;
    Ok(EpFit {
        leaves: lm,
        evidence,
        sweeps: sweeps_done,
        skipped_updates: skipped,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{ks_p_value, ks_statistic, simpson};
    use crate::tree::Attachment;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tilted_quadrature(mean: f64, var: f64, y: bool) -> (f64, f64, f64) {
        let sign = if y { 1.0 } else { -1.0 };
        let sd = var.sqrt();
        let f = |x: f64| {
            ((-0.5 * (x - mean) * (x - mean) / var).exp()
                / (2.0 * std::f64::consts::PI * var).sqrt())
                * 0.5
                * erfc(-sign * x / std::f64::consts::SQRT_2)
        };
        let (lo, hi) = (mean - 12.0 * sd - 12.0, mean + 12.0 * sd + 12.0);
        let z = simpson(&f, lo, hi, 40_000);
        let m = simpson(|x| x * f(x), lo, hi, 40_000) / z;
        let v = simpson(|x| (x - m) * (x - m) * f(x), lo, hi, 40_000) / z;
        (z.ln(), m, v)
    }

    #[test]
    fn moments_reference_case() {
        let (lz, m, v) = probit_moments(0.0, 1.0, true).unwrap();
        assert!((lz - 0.5f64.ln()).abs() < 1e-12);
        assert!((m - 0.5641895835).abs() < 1e-8, "mean {m}");
        assert!((v - 0.6816901138).abs() < 1e-8, "var {v}");
    }

    #[test]
    fn moments_match_quadrature() {
        let cases = [
            (0.3, 0.7, true),
            (-1.2, 2.5, false),
            (2.0, 0.1, true),
            (-0.4, 4.0, true),
            (1.5, 0.5, false),
        ];
        for (mean, var, y) in cases {
            let (lz, m, v) = probit_moments(mean, var, y).unwrap();
            let (qlz, qm, qv) = tilted_quadrature(mean, var, y);
            assert!((lz - qlz).abs() < 1e-6, "logZ {lz} vs {qlz}");
            assert!((m - qm).abs() < 1e-6, "mean {m} vs {qm}");
            assert!((v - qv).abs() < 1e-6, "var {v} vs {qv}");
        }
    }

    #[test]
    fn moments_symmetry_and_degenerate_cavity() {
        let (_, m1, _) = probit_moments(0.8, 1.3, true).unwrap();
        let (_, m0, _) = probit_moments(-0.8, 1.3, false).unwrap();
        assert!((m1 + m0).abs() < 1e-12);
        let (lz, m, _) = probit_moments(0.7, 1e-10, true).unwrap();
        assert!((m - 0.7).abs() < 1e-6);
        assert!((lz - log_phi(0.7 / (1.0f64 + 1e-10).sqrt())).abs() < 1e-9);
    }

    #[test]
    fn log_z_derivative_identities() {
        // d logZ / d mean must equal (tilted mean - mean) / var, and the
        // second derivative relation gives the variance
        let (mean, var, y) = (0.4, 1.7, true);
        let h = 1e-6;
        let (lz_p, _, _) = probit_moments(mean + h, var, y).unwrap();
        let (lz_m, _, _) = probit_moments(mean - h, var, y).unwrap();
        let (lz, tm, tv) = probit_moments(mean, var, y).unwrap();
        let d1 = (lz_p - lz_m) / (2.0 * h);
        assert!((d1 - (tm - mean) / var).abs() < 1e-6);
        let h2 = 1e-4;
        let (lz_p2, _, _) = probit_moments(mean + h2, var, y).unwrap();
        let (lz_m2, _, _) = probit_moments(mean - h2, var, y).unwrap();
        let d2 = (lz_p2 - 2.0 * lz + lz_m2) / (h2 * h2);
        let implied_var = var + var * var * d2;
        assert!((implied_var - tv).abs() < 1e-6, "{implied_var} vs {tv}");
    }

    #[test]
    fn log_phi_tail_is_continuous_and_accurate() {
        // compare both branches around the switch point
        for z in [-5.0, -5.9, -6.1, -8.0, -15.0] {
            let direct = (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln();
            let ours = log_phi(z);
            if direct.is_finite() {
                assert!(
                    (ours - direct).abs() / direct.abs() < 1e-6,
                    "z = {z}: {ours} vs {direct}"
                );
            }
        }
        // far tail stays finite and ordered
        assert!(log_phi(-40.0).is_finite());
        assert!(log_phi(-40.0) < log_phi(-39.0));
    }

    fn single_leaf_tree() -> Tree {
        let mut t = Tree::new(1);
        let l = t.new_leaf(0);
        t.attach_subtree(l, &Attachment::FirstChild).unwrap();
        t
    }

    #[test]
    fn ep_single_site_matches_quadrature() {
        let tree = single_leaf_tree();
        let y = BinaryData::new(1, 1, vec![Some(true)]).unwrap();
        let fit = ep_fit(&tree, 1.0, &y, &EpOptions::default(), None, None).unwrap();
        // the latent prior is N(0, 1); single-site EP is exact here
        let (qlz, qm, qv) = tilted_quadrature(0.0, 1.0, true);
        assert!((fit.evidence - qlz).abs() < 1e-6, "{} vs {qlz}", fit.evidence);
        let mut ev = Evaluator::new(&tree, 1.0, &fit.leaves).unwrap();
        let leaf = tree.leaves()[0];
        let m = ev.marginal(leaf);
        assert!((m[0].mean - qm).abs() < 1e-6);
        assert!((m[0].var - qv).abs() < 1e-6);
    }

    fn two_leaf_tree(t_a: f64) -> Tree {
        let mut t = Tree::new(1);
        let l0 = t.new_leaf(0);
        t.attach_subtree(l0, &Attachment::FirstChild).unwrap();
        let l1 = t.new_leaf(1);
        t.attach_subtree(l1, &Attachment::OnEdge { child: l0, time: t_a })
            .unwrap();
        t
    }

    #[test]
    fn ep_two_leaf_evidence_near_quadrature() {
        let t_a = 0.4;
        let tree = two_leaf_tree(t_a);
        let y = BinaryData::new(2, 1, vec![Some(true), Some(false)]).unwrap();
        let fit = ep_fit(&tree, 1.0, &y, &EpOptions::default(), None, None).unwrap();
        // exact evidence by 2-d quadrature over the leaf latents, which are
        // jointly Gaussian with covariance t_a
        let det: f64 = 1.0 - t_a * t_a;
        let f = |x1: f64, x2: f64| {
            let quad = (x1 * x1 - 2.0 * t_a * x1 * x2 + x2 * x2) / det;
            let prior = (-0.5 * quad).exp()
                / (2.0 * std::f64::consts::PI * det.sqrt());
            let lik = 0.25
                * erfc(-x1 / std::f64::consts::SQRT_2)
                * erfc(x2 / std::f64::consts::SQRT_2);
            prior * lik
        };
        let inner = |x1: f64| simpson(|x2| f(x1, x2), -9.0, 9.0, 600);
        let z = simpson(inner, -9.0, 9.0, 600);
        let rel = (fit.evidence - z.ln()).abs() / z.ln().abs();
        assert!(rel < 0.02, "evidence {} vs {}", fit.evidence, z.ln());
    }

    #[test]
    fn agreeing_observations_push_latents_positive() {
        let hyper = crate::hyper::Hyperparams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let tree = crate::generative::sample_structure(4, 1, &hyper, &mut rng).unwrap();
        let y = BinaryData::new(4, 1, vec![Some(true); 4]).unwrap();
        let fit = ep_fit(&tree, 1.0, &y, &EpOptions::default(), None, None).unwrap();
        let mut ev = Evaluator::new(&tree, 1.0, &fit.leaves).unwrap();
        for leaf in tree.leaves() {
            assert!(ev.marginal(leaf)[0].mean > 0.0);
        }
    }

    #[test]
    fn ep_fixed_point_is_order_independent() {
        let hyper = crate::hyper::Hyperparams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let tree = crate::generative::sample_structure(5, 2, &hyper, &mut rng).unwrap();
        let y = BinaryData::new(
            5,
            2,
            vec![
                Some(true), Some(false),
                Some(true), Some(true),
                Some(false), None,
                Some(false), Some(false),
                Some(true), Some(false),
            ],
        )
        .unwrap();
        let opts = EpOptions {
            max_sweeps: 200,
            tol: 1e-10,
            ..Default::default()
        };
        let a = ep_fit(&tree, 1.0, &y, &opts, Some(&[0, 1, 2, 3, 4]), None).unwrap();
        let b = ep_fit(&tree, 1.0, &y, &opts, Some(&[3, 0, 4, 1, 2]), None).unwrap();
        assert!((a.evidence - b.evidence).abs() < 1e-5);
        let mut ea = Evaluator::new(&tree, 1.0, &a.leaves).unwrap();
        let mut eb = Evaluator::new(&tree, 1.0, &b.leaves).unwrap();
        for leaf in tree.leaves() {
            let (ma, mb) = (ea.marginal(leaf), eb.marginal(leaf));
            for d in 0..2 {
                assert!((ma[d].mean - mb[d].mean).abs() < 1e-5);
                assert!((ma[d].var - mb[d].var).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn aux_slice_matches_quadrature_cdf() {
        let (mean, var, y) = (0.6, 0.8, false);
        let sign = -1.0;
        let dens = |x: f64| {
            (-0.5 * (x - mean) * (x - mean) / var).exp()
                * 0.5
                * erfc(-sign * x / std::f64::consts::SQRT_2)
        };
        let z = simpson(&dens, -12.0, 12.0, 20_000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = 0.0;
        let mut draws = Vec::with_capacity(10_000);
        for i in 0..100_000 {
            x = aux_slice_update(mean, var, y, x, &mut rng);
            if i % 10 == 9 {
                draws.push(x);
            }
        }
        let cdf = |t: f64| simpson(&dens, -12.0, t.max(-11.9), 4000) / z;
        let d = ks_statistic(&mut draws, cdf);
        let p = ks_p_value(d, draws.len());
        assert!(p > 0.01, "KS p = {p}");
    }

    #[test]
    fn flipping_labels_mirrors_the_conditional() {
        let (mean, var) = (0.0, 1.3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sum_pos = 0.0;
        let mut sum_neg = 0.0;
        let n = 30_000;
        let (mut xp, mut xn) = (0.0, 0.0);
        for _ in 0..n {
            xp = aux_slice_update(mean, var, true, xp, &mut rng);
            xn = aux_slice_update(mean, var, false, xn, &mut rng);
            sum_pos += xp;
            sum_neg += xn;
        }
        assert!((sum_pos / n as f64 + sum_neg / n as f64).abs() < 0.02);
    }
}
