//! Small dense optimizers: limited-memory BFGS with a backtracking line
//! search (maximization convention) and golden-section search on an interval.

use std::collections::VecDeque;

/// Result of an L-BFGS run.
#[derive(Debug, Clone)]
pub struct MaximizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// true if a line search failed to find any uphill step
    pub line_search_failed: bool,
}

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub value_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 8,
            max_iters: 200,
            grad_tol: 1e-8,
            value_tol: 1e-12,
        }
    }
}

/// Maximize `f` (value and gradient) from `x0` with the two-loop recursion.
/// Non-finite trial values are treated as rejected steps, which is how
/// barrier-style objectives keep iterates feasible.
pub fn lbfgs_maximize<F>(x0: &[f64], opts: &LbfgsOptions, mut f: F) -> MaximizeResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut value = f(&x, &mut g);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut line_search_failed = false;

    if n == 0 {
        return MaximizeResult {
            x,
            value,
            iterations: 0,
            converged: true,
            line_search_failed,
        };
    }

    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..opts.max_iters {
        iterations += 1;
        let gmax = g.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if gmax < opts.grad_tol {
            converged = true;
            break;
        }
        // ascent direction from the two-loop recursion on the negated problem
        let mut dir = two_loop(&g, &hist);
        let mut slope: f64 = dir.iter().zip(&g).map(|(d, gg)| d * gg).sum();
        if !slope.is_finite() || slope <= 0.0 {
            dir = g.clone();
            slope = g.iter().map(|v| v * v).sum();
            hist.clear();
        }

        // backtracking Armijo line search
        let mut step = 1.0;
        let mut accepted = false;
        let mut x_new = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        let mut v_new = f64::NEG_INFINITY;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            v_new = f(&x_new, &mut g_new);
            if v_new.is_finite() && v_new >= value + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            line_search_failed = true;
            break;
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy < 0.0 && sy.is_finite() {
            // curvature condition holds for the negated (minimization) pair
            if hist.len() >= opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }

        let improvement = v_new - value;
        x = x_new.clone();
        g = g_new.clone();
        value = v_new;
        if improvement.abs() < opts.value_tol * (1.0 + value.abs()) {
            converged = true;
            break;
        }
    }

    MaximizeResult {
        x,
        value,
        iterations,
        converged,
        line_search_failed,
    }
}

/// Two-loop recursion returning an ascent direction for the current gradient.
fn two_loop(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    // work on the minimization problem for -f: gradient -g, pairs (s, -y)
    let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho_inv) in hist.iter().rev() {
        // rho for the minimization pair (s, -y): 1 / (s . -y) = -rho_inv
        let rho = -rho_inv;
        let a = rho * s.iter().zip(&q).map(|(si, qi)| si * qi).sum::<f64>();
        for i in 0..q.len() {
            q[i] -= a * -y[i];
        }
        alphas.push((a, rho));
    }
    if let Some((s, y, _)) = hist.back() {
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let sy: f64 = -s.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        if yy > 0.0 && sy > 0.0 {
            let scale = sy / yy;
            for v in q.iter_mut() {
                *v *= scale;
            }
        }
    }
    for ((s, y, _), (a, rho)) in hist.iter().zip(alphas.iter().rev()) {
        let b = rho * (-1.0) * y.iter().zip(&q).map(|(yi, qi)| yi * qi).sum::<f64>();
        for i in 0..q.len() {
            q[i] += s[i] * (a - b);
        }
    }
    // q approximates the quasi-Newton direction for minimizing -f; its
    // negation is the ascent direction for f
    for v in q.iter_mut() {
        *v = -*v;
    }
    q
}

/// Golden-section maximization of a unimodal function on [lo, hi].
pub fn golden_max<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    (x, fx)
}
