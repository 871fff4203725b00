//! Priors on the variance and covariance parameters and the unconstrained
//! coordinates used by the Metropolis step.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::covariance::{CovarianceForm, CovarianceParams};
use crate::error::{Error, Result};

/// Prior of one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Prior {
    /// Flat on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
    /// Density proportional to `x^-(shape+1) exp(-rate / x)`.
    InverseGamma { shape: f64, rate: f64 },
    /// Held at `value`.
    Fixed { value: f64 },
}

impl Prior {
    pub fn is_fixed(&self) -> bool {
        matches!(self, Prior::Fixed { .. })
    }

    /// Log density up to the normalizing constant of the uniform; `-inf`
    /// outside the support.
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            Prior::Uniform { lo, hi } => {
                if x >= lo && x <= hi {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::InverseGamma { shape, rate } => {
                if x > 0.0 {
                    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::Fixed { value } => {
                if x == value {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Starting value: the box midpoint (geometric when the box is positive),
    /// the mean of an inverse gamma (its mode when the mean is infinite), or
    /// the fixed value.
    pub fn initial(&self) -> f64 {
        match *self {
            Prior::Uniform { lo, hi } => {
                if lo > 0.0 {
                    (lo * hi).sqrt()
                } else {
                    0.5 * (lo + hi)
                }
            }
            Prior::InverseGamma { shape, rate } => {
                if shape > 1.0 {
                    rate / (shape - 1.0)
                } else {
                    rate / (shape + 1.0)
                }
            }
            Prior::Fixed { value } => value,
        }
    }

    fn check(&self, name: &str, positive: bool) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("prior on {name}: {msg}")));
        match *self {
            Prior::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return bad(format!("uniform bounds must be finite with lo < hi (got {lo}, {hi})"));
                }
                if positive && lo < 0.0 {
                    return bad(format!("lower bound must be non-negative (got {lo})"));
                }
            }
            Prior::InverseGamma { shape, rate } => {
                if !(shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
                    return bad(format!("inverse gamma needs positive shape and rate (got {shape}, {rate})"));
                }
            }
            Prior::Fixed { value } => {
                if !value.is_finite() || (positive && value <= 0.0) {
                    return bad(format!("invalid fixed value {value}"));
                }
            }
        }
        Ok(())
    }
}

/// How a sampled component maps to the real line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Transform {
    /// `z = ln x`.
    Log,
    /// `z = logit((x - lo) / (hi - lo))`.
    Logit { lo: f64, hi: f64 },
}

impl Transform {
    pub(crate) fn forward(&self, x: f64) -> f64 {
        match *self {
            Transform::Log => x.ln(),
            Transform::Logit { lo, hi } => {
                let p = (x - lo) / (hi - lo);
                (p / (1.0 - p)).ln()
            }
        }
    }

    pub(crate) fn inverse(&self, z: f64) -> f64 {
        match *self {
            Transform::Log => z.exp(),
            Transform::Logit { lo, hi } => lo + (hi - lo) / (1.0 + (-z).exp()),
        }
    }

    /// `ln |dx/dz|` at `x`.
    pub(crate) fn log_jacobian(&self, x: f64) -> f64 {
        match *self {
            Transform::Log => x.ln(),
            Transform::Logit { lo, hi } => (x - lo).ln() + (hi - x).ln() - (hi - lo).ln(),
        }
    }
}

/// Priors on the four covariance parameters. The remaining shape parameters
/// of the Matérn form (`alpha`, `nu`, `delta`) are held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaPriors {
    pub sigma2: Prior,
    pub a: Prior,
    pub c: Prior,
    pub kappa: Prior,
    #[serde(default = "default_form")]
    pub form: CovarianceForm,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "half")]
    pub nu: f64,
    #[serde(default)]
    pub delta: f64,
}

fn default_form() -> CovarianceForm {
    CovarianceForm::Exponential
}
fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}

/// Names of the covariance parameters in storage order.
pub const THETA_NAMES: [&str; 4] = ["sigma2", "a", "c", "kappa"];

impl ThetaPriors {
    /// Priors for the exponential form.
    pub fn exponential(sigma2: Prior, a: Prior, c: Prior, kappa: Prior) -> Self {
        ThetaPriors { sigma2, a, c, kappa, form: CovarianceForm::Exponential, alpha: 1.0, nu: 0.5, delta: 0.0 }
    }

    pub fn priors(&self) -> [Prior; 4] {
        [self.sigma2, self.a, self.c, self.kappa]
    }

    pub fn validate(&self) -> Result<()> {
        for (k, p) in self.priors().iter().enumerate() {
            p.check(THETA_NAMES[k], true)?;
        }
        match self.kappa {
            Prior::Uniform { lo, hi } if hi > 1.0 || lo < 0.0 => {
                return Err(Error::Config(format!("kappa box [{lo}, {hi}] must lie within [0, 1]")));
            }
            Prior::InverseGamma { .. } => {
                return Err(Error::Config("kappa needs a uniform or fixed prior".into()));
            }
            _ => {}
        }
        // the initial point must be a valid parameter value
        self.params(&self.initial_values())?;
        Ok(())
    }

    /// Parameters from `(sigma2, a, c, kappa)` values.
    pub fn params(&self, v: &[f64; 4]) -> Result<CovarianceParams> {
        let p = CovarianceParams {
            sigma2: v[0],
            a: v[1],
            c: v[2],
            kappa: v[3],
            alpha: self.alpha,
            nu: self.nu,
            delta: self.delta,
            form: self.form,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn initial_values(&self) -> [f64; 4] {
        let p = self.priors();
        [p[0].initial(), p[1].initial(), p[2].initial(), p[3].initial()]
    }

    /// `sum_k log p(theta_k)`.
    pub fn log_density(&self, p: &CovarianceParams) -> f64 {
        let v = values(p);
        self.priors().iter().zip(v).map(|(pr, x)| pr.log_density(x)).sum()
    }

    /// Indices and transforms of the sampled components.
    pub(crate) fn sampled(&self) -> Vec<(usize, Transform)> {
        self.priors()
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_fixed())
            .map(|(k, p)| {
                let t = match (k, p) {
                    (3, Prior::Uniform { lo, hi }) => Transform::Logit { lo: *lo, hi: *hi },
                    _ => Transform::Log,
                };
                (k, t)
            })
            .collect()
    }
}

pub(crate) fn values(p: &CovarianceParams) -> [f64; 4] {
    [p.sigma2, p.a, p.c, p.kappa]
}

/// Inverse gamma prior on the nugget variance, or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Tau2Prior {
    InverseGamma { shape: f64, rate: f64 },
    Fixed { value: f64 },
}

impl Tau2Prior {
    pub(crate) fn as_prior(&self) -> Prior {
        match *self {
            Tau2Prior::InverseGamma { shape, rate } => Prior::InverseGamma { shape, rate },
            Tau2Prior::Fixed { value } => Prior::Fixed { value },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.as_prior().check("tau2", true)
    }
}

/// Prior on the regression coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaPrior {
    Flat,
    /// Normal with the given mean and row-major covariance.
    Normal { mean: Vec<f64>, cov: Vec<f64> },
}
