//! Helpers shared by unit, integration, and acceptance tests. Not part of the
//! stable API.

use rand::Rng;

use crate::generative::sample_tree;
use crate::hyper::Hyperparams;
use crate::tree::Tree;

/// Shortest edge duration in the tree.
pub fn min_edge_duration(tree: &Tree) -> f64 {
    let mut min = f64::MAX;
    for id in tree.preorder() {
        if let Some(p) = tree.node(id).parent {
            min = min.min(tree.node(id).time - tree.node(p).time);
        }
    }
    min
}

/// Sample a located tree whose edge durations stay comfortably above the f64
/// resolution near t = 1, so that 1e-10 oracle tolerances are meaningful.
pub fn representable_tree<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Tree {
    for _ in 0..1000 {
        let tree = sample_tree(n, dim, hyper, rng).expect("sampling failed");
        if min_edge_duration(&tree) >= 1e-8 {
            return tree;
        }
    }
    panic!("could not sample a numerically comfortable tree at {hyper:?}");
}

/// Kolmogorov-Smirnov statistic of `samples` against a CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Asymptotic p-value for the Kolmogorov-Smirnov statistic.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let n = n as f64;
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1.0f64).powi(k as i32 + 1) * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

/// Pearson chi-square p-value for observed counts against expected
/// probabilities.
pub fn chi_square_p_value(observed: &[usize], expected_probs: &[f64]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    assert_eq!(observed.len(), expected_probs.len());
    let total: usize = observed.iter().sum();
    let mut stat = 0.0;
    for (&o, &p) in observed.iter().zip(expected_probs) {
        let e = p * total as f64;
        assert!(e > 0.0, "expected count must be positive");
        stat += (o as f64 - e).powi(2) / e;
    }
    let dist = ChiSquared::new((observed.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Composite Simpson integration.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        acc += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ks_uniform_sanity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut xs: Vec<f64> = (0..5000).map(|_| rng.gen::<f64>()).collect();
        let d = ks_statistic(&mut xs, |x| x.clamp(0.0, 1.0));
        assert!(ks_p_value(d, 5000) > 0.01);
        // a clearly wrong CDF must be rejected
        let d_bad = ks_statistic(&mut xs, |x| (x * x).clamp(0.0, 1.0));
        assert!(ks_p_value(d_bad, 5000) < 1e-6);
    }

    #[test]
    fn chi_square_sanity() {
        let p = chi_square_p_value(&[250, 240, 260, 250], &[0.25; 4]);
        assert!(p > 0.05, "{p}");
        let p_bad = chi_square_p_value(&[400, 200, 200, 200], &[0.25; 4]);
        assert!(p_bad < 1e-6, "{p_bad}");
    }

    #[test]
    fn simpson_integrates_polynomials() {
        let v = simpson(|x| x * x, 0.0, 1.0, 100);
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}
