//! Divergence rate function, generalized harmonic sums, branch-choice
//! probabilities, and inverse-CDF divergence-time sampling.
//!
//! All Gamma-function ratios go through log-Gamma differences; the raw ratios
//! overflow once counts reach the thousands.

use rand::Rng;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Divergence function seam: samplers and densities only need the rate, its
/// integral, and the inverse of the integral.
pub trait DivergenceFn {
    /// Instantaneous rate a(t) for t in [0, 1).
    fn rate(&self, t: f64) -> f64;
    /// Cumulative rate A(t) = integral of a over [0, t].
    fn cumulative(&self, t: f64) -> f64;
    /// Inverse of the cumulative rate; returns a time in [0, 1].
    fn inverse_cumulative(&self, a: f64) -> f64;
}

/// The rate family a(t) = c / (1 - t), with smoothness parameter c > 0.
/// Its integral diverges at t = 1, so every path diverges before the leaves.
#[derive(Debug, Clone, Copy)]
pub struct ReciprocalDivergence {
    pub c: f64,
}

impl DivergenceFn for ReciprocalDivergence {
    fn rate(&self, t: f64) -> f64 {
        self.c / (1.0 - t)
    }

    fn cumulative(&self, t: f64) -> f64 {
        -self.c * (1.0 - t).ln()
    }

    fn inverse_cumulative(&self, a: f64) -> f64 {
        // clamp to the predecessor of 1.0: huge accumulated rates otherwise
        // round to exactly 1, which would collide with the leaf time
        (1.0 - (-a / self.c).exp()).min(1.0 - f64::EPSILON / 2.0)
    }
}

/// Instantaneous divergence rate c / (1 - t).
pub fn a_rate(t: f64, c: f64) -> Result<f64> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidArgument(format!("smoothness c = {c}")));
    }
    if !(0.0..1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "rate requested at t = {t}, outside [0, 1)"
        )));
    }
    Ok(ReciprocalDivergence { c }.rate(t))
}

/// Cumulative divergence rate -c ln(1 - t).
pub fn a_cum(t: f64, c: f64) -> Result<f64> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidArgument(format!("smoothness c = {c}")));
    }
    if !(0.0..1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "cumulative rate requested at t = {t}, outside [0, 1)"
        )));
    }
    Ok(ReciprocalDivergence { c }.cumulative(t))
}

/// Log of Gamma(m - beta) / Gamma(m + 1 + alpha): the factor by which the
/// divergence rate is damped on a branch already followed by `m` points.
pub fn log_count_damping(m: usize, alpha: f64, beta: f64) -> f64 {
    let m = m as f64;
    ln_gamma(m - beta) - ln_gamma(m + 1.0 + alpha)
}

/// Generalized harmonic sum: sum over i = 1..=n of
/// Gamma(i - beta) / Gamma(i + 1 + alpha). Reduces to the n-th harmonic
/// number at alpha = beta = 0.
pub fn h_gen(n: usize, alpha: f64, beta: f64) -> f64 {
    (1..=n)
        .map(|i| log_count_damping(i, alpha, beta).exp())
        .sum()
}

/// Prefix table of `h_gen`: entry `m` holds `h_gen(m, alpha, beta)`.
/// Densities over whole trees use this to avoid quadratic log-Gamma calls.
pub fn h_gen_table(n_max: usize, alpha: f64, beta: f64) -> Vec<f64> {
    let mut table = Vec::with_capacity(n_max + 1);
    table.push(0.0);
    let mut acc = 0.0;
    for i in 1..=n_max {
        acc += log_count_damping(i, alpha, beta).exp();
        table.push(acc);
    }
    table
}

/// Exponent scale for the divergence-time prior of a branch point with the
/// given child counts: h_gen over the total minus the per-branch sums.
pub fn j_factor(counts: &[usize], alpha: f64, beta: f64) -> Result<f64> {
    if counts.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "branch point needs >= 2 branches, got {}",
            counts.len()
        )));
    }
    if counts.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArgument("empty branch".into()));
    }
    let m: usize = counts.iter().sum();
    let total = h_gen(m - 1, alpha, beta);
    let parts: f64 = counts.iter().map(|&n| h_gen(n - 1, alpha, beta)).sum();
    Ok(total - parts)
}

/// Probabilities of the K + 1 outcomes at a branch point with per-branch
/// counts `counts`: follow branch k, or start a new branch (last entry).
/// The last entry is the exact residual so the vector sums to one.
pub fn branch_probs(counts: &[usize], alpha: f64, beta: f64) -> Result<Vec<f64>> {
    let k = counts.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "branch point needs >= 2 branches, got {k}"
        )));
    }
    if counts.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArgument("empty branch".into()));
    }
    let m: f64 = counts.iter().sum::<usize>() as f64;
    let new_mass = alpha + beta * k as f64;
    if new_mass < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "negative new-branch mass {new_mass}"
        )));
    }
    let denom = m + alpha;
    let mut probs: Vec<f64> = counts.iter().map(|&n| (n as f64 - beta) / denom).collect();
    let existing: f64 = probs.iter().sum();
    // exact zero when alpha = beta = 0: new branches are impossible, not just
    // improbable
    probs.push(if new_mass == 0.0 { 0.0 } else { 1.0 - existing });
    Ok(probs)
}

/// Draw the outcome index at a branch point: `0..K` follows that branch,
/// `K` starts a new one. A zero new-branch mass can never be drawn.
pub fn sample_branch_choice<R: Rng + ?Sized>(
    counts: &[usize],
    alpha: f64,
    beta: f64,
    rng: &mut R,
) -> Result<usize> {
    let k = counts.len();
    let m: f64 = counts.iter().sum::<usize>() as f64;
    let new_mass = alpha + beta * k as f64;
    let weights: Vec<f64> = counts.iter().map(|&n| n as f64 - beta).collect();
    if new_mass == 0.0 {
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                return Ok(i);
            }
        }
        return Ok(k - 1);
    }
    let total = m + alpha;
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return Ok(i);
        }
    }
    Ok(k)
}

/// Divergence time implied by a unit-exponential draw `e`, starting at
/// `t_start` on a branch previously followed by `m` points.
pub fn divergence_time_from_exponential<D: DivergenceFn>(
    div: &D,
    t_start: f64,
    m: usize,
    alpha: f64,
    beta: f64,
    e: f64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&t_start) {
        return Err(Error::InvalidArgument(format!(
            "divergence walk starting at t = {t_start}"
        )));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("empty branch".into()));
    }
    // accumulated-rate space: the waiting quantity is exponential with the
    // count damping as its rate
    let scale = (-log_count_damping(m, alpha, beta)).exp();
    Ok(div.inverse_cumulative(div.cumulative(t_start) + e * scale))
}

/// Sample a divergence time after `t_start` on a branch of count `m`.
/// Returns `None` if the draw exceeds the total accumulated rate (impossible
/// for rate families whose integral diverges at 1).
pub fn sample_divergence_time<D: DivergenceFn, R: Rng + ?Sized>(
    div: &D,
    t_start: f64,
    m: usize,
    alpha: f64,
    beta: f64,
    rng: &mut R,
) -> Result<Option<f64>> {
    let e: f64 = rng.sample(rand_distr::Exp1);
    let t = divergence_time_from_exponential(div, t_start, m, alpha, beta, e)?;
    Ok(if t < 1.0 { Some(t) } else { None })
}
