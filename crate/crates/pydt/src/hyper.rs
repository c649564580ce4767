//! Model hyperparameters and their priors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gamma prior with shape/rate parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Self {
        Self { shape, rate }
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    /// Log density at `x > 0`.
    pub fn log_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - statrs::function::gamma::ln_gamma(self.shape)
            + (self.shape - 1.0) * x.ln()
            - self.rate * x
    }
}

/// Beta prior on a [0, 1) parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub a: f64,
    pub b: f64,
}

impl BetaPrior {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        if !(0.0..1.0).contains(&x) {
            return f64::NEG_INFINITY;
        }
        use statrs::function::gamma::ln_gamma;
        let ln_b = ln_gamma(self.a) + ln_gamma(self.b) - ln_gamma(self.a + self.b);
        (self.a - 1.0) * x.ln() + (self.b - 1.0) * (1.0 - x).ln() - ln_b
    }
}

/// Priors on the four model hyperparameters. The precision prior applies to
/// `1/sigma2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPriors {
    pub alpha: GammaPrior,
    pub beta: BetaPrior,
    pub c: GammaPrior,
    pub precision: GammaPrior,
}

impl Default for HyperPriors {
    fn default() -> Self {
        Self {
            alpha: GammaPrior::new(2.0, 0.5),
            beta: BetaPrior::new(1.0, 1.0),
            c: GammaPrior::new(1.0, 1.0),
            precision: GammaPrior::new(1.0, 1.0),
        }
    }
}

/// Point values of the model hyperparameters plus their priors.
///
/// Constraints: `c > 0`, `sigma2 > 0`, `alpha >= 0`, `0 <= beta < 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub c: f64,
    pub sigma2: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub priors: HyperPriors,
}

impl Hyperparams {
    pub fn new(c: f64, sigma2: f64, alpha: f64, beta: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidHyper(format!("c must be positive, got {c}")));
        }
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::InvalidHyper(format!(
                "sigma2 must be positive, got {sigma2}"
            )));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::InvalidHyper(format!(
                "alpha must be nonnegative, got {alpha}"
            )));
        }
        if !(beta.is_finite() && (0.0..1.0).contains(&beta)) {
            return Err(Error::InvalidHyper(format!(
                "beta must lie in [0, 1), got {beta}"
            )));
        }
        Ok(Self {
            c,
            sigma2,
            alpha,
            beta,
            priors: HyperPriors::default(),
        })
    }

    pub fn with_priors(mut self, priors: HyperPriors) -> Self {
        self.priors = priors;
        self
    }

    /// DDT special case: binary branching only.
    pub fn ddt(c: f64, sigma2: f64) -> Result<Self> {
        Self::new(c, sigma2, 0.0, 0.0)
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0, 0.0).unwrap()
    }
}
