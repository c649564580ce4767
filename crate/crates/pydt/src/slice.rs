//! Univariate slice sampler with stepping out and shrinkage.

use rand::Rng;

/// One slice-sampling update of `x0` under the log density `log_f`.
/// `width` is the initial bracket size; stepping out is unlimited.
pub fn slice_sample<F, R>(x0: f64, width: f64, log_f: &mut F, rng: &mut R) -> f64
where
    F: FnMut(f64) -> f64,
    R: Rng + ?Sized,
{
    let w = if width > 0.0 { width } else { f64::MIN_POSITIVE };
    let fx0 = log_f(x0);
    debug_assert!(fx0.is_finite(), "slice sampler started outside support");
    let level = fx0 + rng.gen::<f64>().ln();

    // stepping out
    let mut left = x0 - rng.gen::<f64>() * w;
    let mut right = left + w;
    while log_f(left) > level {
        left -= w;
    }
    while log_f(right) > level {
        right += w;
    }

    // shrinkage
    loop {
        let x1 = left + rng.gen::<f64>() * (right - left);
        if log_f(x1) > level {
            return x1;
        }
        if x1 < x0 {
            left = x1;
        } else {
            right = x1;
        }
    }
}
