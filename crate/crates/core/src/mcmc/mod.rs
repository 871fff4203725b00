//! The hierarchical regression model with a sparse space-time random effect
//! and its MCMC sampler.
//!
//! ```text
//! y(l) = x(l)' beta + w(l) + eps(l),   eps ~ N(0, tau2)
//! w    ~ sparse process with covariance parameters theta
//! ```
//!
//! `beta`, `tau2` and `w` are drawn from their full conditionals and `theta`
//! by a block random-walk Metropolis step on transformed coordinates. Under
//! the adaptive scheme the neighbor sets of a proposal are rebuilt from the
//! eligible sets before its density is evaluated and kept only if the
//! proposal is accepted.

mod chain;
mod prior;
mod proposal;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use chain::{ChainState, Sampler};
pub use prior::{BetaPrior, Prior, Tau2Prior, ThetaPriors, THETA_NAMES};
pub(crate) use prior::{values, Transform};
pub(crate) use proposal::Proposal;

use crate::covariance::CovarianceParams;
use crate::error::{Error, Result};
use crate::neighbors::Scheme;
use crate::spacetime::ReferenceSet;

/// Largest neighbor budget accepted by the sampler.
pub const MAX_M: usize = 64;

/// Priors of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Priors {
    pub beta: BetaPrior,
    pub tau2: Tau2Prior,
    pub theta: ThetaPriors,
}

impl Default for Priors {
    /// Flat `beta`, `tau2 ~ IG(2, 0.1)`, `sigma2 ~ IG(2, 1)`,
    /// `a ~ U(1, 100)`, `c ~ U(0, 50)`, `kappa ~ U(0, 1)`.
    fn default() -> Self {
        Priors {
            beta: BetaPrior::Flat,
            tau2: Tau2Prior::InverseGamma { shape: 2.0, rate: 0.1 },
            theta: ThetaPriors::exponential(
                Prior::InverseGamma { shape: 2.0, rate: 1.0 },
                Prior::Uniform { lo: 1.0, hi: 100.0 },
                Prior::Uniform { lo: 0.0, hi: 50.0 },
                Prior::Uniform { lo: 0.0, hi: 1.0 },
            ),
        }
    }
}

/// Optional starting values overriding the defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InitialValues {
    pub beta: Option<Vec<f64>>,
    pub tau2: Option<f64>,
    pub theta: Option<CovarianceParams>,
    pub w: Option<Vec<f64>>,
}

/// Data, priors and neighbor settings of one model.
///
/// Every reference point has a covariate row; `y[i]` is `None` where the
/// response is missing. `m = 0` drops the random effect altogether, leaving
/// a Bayesian linear regression.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub reference: ReferenceSet,
    /// `r x p` covariates, aligned with the reference enumeration.
    pub x: DMatrix<f64>,
    pub y: Vec<Option<f64>>,
    pub priors: Priors,
    pub scheme: Scheme,
    pub m: usize,
    pub init: InitialValues,
}

impl ModelSpec {
    /// A model with default priors and the adaptive scheme.
    pub fn new(reference: ReferenceSet, x: DMatrix<f64>, y: Vec<Option<f64>>, m: usize) -> Result<Self> {
        let spec = ModelSpec {
            reference,
            x,
            y,
            priors: Priors::default(),
            scheme: Scheme::Adaptive,
            m,
            init: InitialValues::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_priors(mut self, priors: Priors) -> Result<Self> {
        self.priors = priors;
        self.validate()?;
        Ok(self)
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Result<Self> {
        self.scheme = scheme;
        self.validate()?;
        Ok(self)
    }

    pub fn r(&self) -> usize {
        self.reference.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Whether the model has a random effect.
    pub fn is_spatial(&self) -> bool {
        self.m > 0
    }

    /// Reference indices with an observed response, ascending.
    pub fn observed(&self) -> Vec<usize> {
        (0..self.y.len()).filter(|&i| self.y[i].is_some()).collect()
    }

    pub fn n_obs(&self) -> usize {
        self.y.iter().filter(|v| v.is_some()).count()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.reference.len();
        if self.x.nrows() != r {
            return Err(Error::Dimension { expected: r, got: self.x.nrows() });
        }
        if self.y.len() != r {
            return Err(Error::Dimension { expected: r, got: self.y.len() });
        }
        if self.x.ncols() == 0 {
            return Err(Error::InvalidInput("design matrix has no columns".into()));
        }
        for i in 0..r {
            if let Some(v) = self.y[i] {
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!("response at point {i} is not finite")));
                }
                if self.x.row(i).iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!("observed point {i} has a missing covariate")));
                }
            }
        }
        if self.m > MAX_M {
            return Err(Error::NeighborBudget(format!("m = {} exceeds the maximum of {MAX_M}", self.m)));
        }
        if self.m > 0 && self.scheme == Scheme::Simple {
            let s = (self.m as f64).sqrt().round() as usize;
            if s * s != self.m {
                return Err(Error::NeighborBudget(format!("simple scheme needs a perfect square m, got {}", self.m)));
            }
        }
        self.priors.tau2.validate()?;
        if self.m > 0 {
            self.priors.theta.validate()?;
        }
        if let BetaPrior::Normal { mean, cov } = &self.priors.beta {
            let p = self.p();
            if mean.len() != p || cov.len() != p * p {
                return Err(Error::Config(format!("beta prior needs a mean of length {p} and a {p}x{p} covariance")));
            }
        }
        let init = &self.init;
        if init.beta.as_ref().is_some_and(|b| b.len() != self.p()) {
            return Err(Error::Config("initial beta has the wrong length".into()));
        }
        if init.w.as_ref().is_some_and(|w| w.len() != r) {
            return Err(Error::Config("initial w has the wrong length".into()));
        }
        Ok(())
    }
}

/// Run length and seeding of the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Total iterations per chain, burn-in included.
    pub n_iter: usize,
    pub n_burn: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub thin: usize,
    /// Whether stored draws keep the full random effect.
    pub store_w: bool,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burn > self.n_iter {
            return Err(Error::Config(format!("n_burn ({}) exceeds n_iter ({})", self.n_burn, self.n_iter)));
        }
        if self.thin == 0 || self.n_chains == 0 {
            return Err(Error::Config("thin and n_chains must be positive".into()));
        }
        Ok(())
    }

    /// Stored draws per chain.
    pub fn kept_per_chain(&self) -> usize {
        (self.n_iter - self.n_burn).div_ceil(self.thin)
    }
}

/// One stored posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub chain: usize,
    /// Zero-based iteration within the chain.
    pub iter: usize,
    pub beta: Vec<f64>,
    pub tau2: f64,
    pub theta: CovarianceParams,
    /// Empty unless the random effect was stored.
    pub w: Vec<f64>,
}

/// Metropolis statistics of one chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub chain: usize,
    /// Acceptance rate during burn-in.
    pub burn_acceptance: f64,
    /// Acceptance rate after burn-in.
    pub acceptance: f64,
    /// Final proposal scale.
    pub scale: f64,
}

/// Stored draws of all chains, ordered by chain and iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub p: usize,
    pub r: usize,
    pub draws: Vec<Draw>,
    pub diagnostics: Vec<ChainDiagnostics>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn has_w(&self) -> bool {
        self.draws.first().is_some_and(|d| d.w.len() == self.r)
    }

    /// Scalar parameter names: `beta_0..`, `tau2`, then the covariance
    /// parameters.
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.p).map(|k| format!("beta_{k}")).collect();
        v.push("tau2".into());
        v.extend(THETA_NAMES.iter().map(|s| s.to_string()));
        v
    }

    /// Draws of a named scalar parameter.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let get: Box<dyn Fn(&Draw) -> f64> = match name {
            "tau2" => Box::new(|d| d.tau2),
            "sigma2" => Box::new(|d| d.theta.sigma2),
            "a" => Box::new(|d| d.theta.a),
            "c" => Box::new(|d| d.theta.c),
            "kappa" => Box::new(|d| d.theta.kappa),
            _ => {
                let k: usize = name
                    .strip_prefix("beta_")
                    .and_then(|s| s.parse().ok())
                    .filter(|&k| k < self.p)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
                Box::new(move |d| d.beta[k])
            }
        };
        Ok(self.draws.iter().map(get).collect())
    }

    pub fn mean(&self, name: &str) -> Result<f64> {
        let v = self.column(name)?;
        if v.is_empty() {
            return Err(Error::TooFewDraws { needed: 1, have: 0 });
        }
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Equal-tailed credible interval at `level`.
    pub fn interval(&self, name: &str, level: f64) -> Result<(f64, f64)> {
        let v = self.column(name)?;
        if v.is_empty() {
            return Err(Error::TooFewDraws { needed: 1, have: 0 });
        }
        let lo = (1.0 - level) / 2.0;
        Ok((quantile(&v, lo), quantile(&v, 1.0 - lo)))
    }

    /// Pointwise posterior mean of the random effect.
    pub fn w_mean(&self) -> Result<Vec<f64>> {
        if !self.has_w() {
            return Err(Error::InvalidInput("the random effect was not stored".into()));
        }
        let mut m = vec![0.0; self.r];
        for d in &self.draws {
            for (a, b) in m.iter_mut().zip(&d.w) {
                *a += b;
            }
        }
        let n = self.draws.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        Ok(m)
    }
}

/// Linear-interpolation sample quantile (type 7).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let n = v.len();
    if n == 1 {
        return v[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Runs all chains and collects the stored draws.
pub fn run_sampler(spec: &ModelSpec, config: &SamplerConfig) -> Result<PosteriorSamples> {
    config.validate()?;
    let sampler = Sampler::new(spec)?;
    let results: Vec<Result<(Vec<Draw>, ChainDiagnostics)>> =
        (0..config.n_chains).into_par_iter().map(|c| sampler.run_chain(config, c)).collect();
    let mut draws = Vec::with_capacity(config.n_chains * config.kept_per_chain());
    let mut diagnostics = Vec::with_capacity(config.n_chains);
    for res in results {
        let (d, diag) = res?;
        draws.extend(d);
        diagnostics.push(diag);
    }
    Ok(PosteriorSamples { p: spec.p(), r: spec.r(), draws, diagnostics })
}

#[cfg(test)]
mod tests;
