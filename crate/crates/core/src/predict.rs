//! Posterior predictive draws at reference points with missing responses and
//! at new space-time points.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::covariance::Kernel;
use crate::error::{Error, Result};
use crate::mcmc::{quantile_sorted, ModelSpec, PosteriorSamples};
use crate::neighbors::{PredictionCandidates, Scheme};
use crate::process::point_factors_on;
use crate::spacetime::SpaceTimePoint;

/// Summary of the predictive draws at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub mean: f64,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
    /// `P(y > threshold)` for each configured threshold.
    pub exceed: Vec<f64>,
}

/// Predictive draws, one vector per target point.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDraws {
    pub draws: Vec<Vec<f64>>,
}

impl PredictiveDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Applies `f` to every draw, e.g. to undo a response transform.
    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Self {
        PredictiveDraws { draws: self.draws.iter().map(|d| d.iter().map(|&v| f(v)).collect()).collect() }
    }

    pub fn summaries(&self, thresholds: &[f64]) -> Vec<PredictiveSummary> {
        self.draws.iter().map(|d| summarize(d, thresholds)).collect()
    }
}

/// Mean, quantiles and exceedance probabilities of one sample.
pub fn summarize(values: &[f64], thresholds: &[f64]) -> PredictiveSummary {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    PredictiveSummary {
        mean: v.iter().sum::<f64>() / n,
        median: quantile_sorted(&v, 0.5),
        q025: quantile_sorted(&v, 0.025),
        q975: quantile_sorted(&v, 0.975),
        exceed: thresholds.iter().map(|&t| v.iter().filter(|&&x| x > t).count() as f64 / n).collect(),
    }
}

fn check_samples(samples: &PosteriorSamples, spec: &ModelSpec) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::TooFewDraws { needed: 1, have: 0 });
    }
    if samples.p != spec.p() || samples.r != spec.r() {
        return Err(Error::InvalidInput("posterior samples do not belong to this model".into()));
    }
    if spec.is_spatial() && !samples.has_w() {
        return Err(Error::InvalidInput("prediction needs stored random-effect draws".into()));
    }
    Ok(())
}

fn rng_for(seed: u64, target: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(target as u64);
    rng
}

/// `y* ~ N(x' beta + w, tau2)` per draw at reference points, typically those
/// with a missing response.
pub fn predict_reference_missing(
    samples: &PosteriorSamples,
    spec: &ModelSpec,
    targets: &[usize],
    seed: u64,
) -> Result<PredictiveDraws> {
    check_samples(samples, spec)?;
    for &i in targets {
        if i >= spec.r() {
            return Err(Error::IndexOutOfRange { index: i, len: spec.r() });
        }
        if spec.x.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("reference point {i} has a missing covariate")));
        }
    }
    let draws = targets
        .par_iter()
        .map(|&i| {
            let mut rng = rng_for(seed, i);
            let x = spec.x.row(i);
            samples
                .draws
                .iter()
                .map(|d| {
                    let xb: f64 = x.iter().zip(&d.beta).map(|(a, b)| a * b).sum();
                    let w = if d.w.is_empty() { 0.0 } else { d.w[i] };
                    xb + w + d.tau2.sqrt() * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        })
        .collect();
    Ok(PredictiveDraws { draws })
}

/// Per-draw mean and variance of the random effect at a new point.
pub fn latent_conditionals(
    samples: &PosteriorSamples,
    spec: &ModelSpec,
    point: &SpaceTimePoint,
) -> Result<Vec<(f64, f64)>> {
    check_samples(samples, spec)?;
    if !spec.is_spatial() {
        return Ok(vec![(0.0, 0.0); samples.len()]);
    }
    let reference = &spec.reference;
    let cands = PredictionCandidates::new(point, reference, spec.scheme, spec.m)?;
    let fixed = match (&cands, spec.scheme) {
        (PredictionCandidates::Fixed(set), Scheme::Simple) => Some(set.clone()),
        _ => None,
    };
    samples
        .draws
        .iter()
        .map(|d| {
            let kernel = Kernel::new(&d.theta)?;
            let nb = match &fixed {
                Some(set) => set.clone(),
                None => cands.select(point, reference, &kernel),
            };
            let pf = point_factors_on(point, nb, reference, &kernel)?;
            Ok((pf.cond_mean(&d.w), pf.cond_var))
        })
        .collect()
}

/// Predictive draws at points off the reference set. `x` holds one
/// covariate row per point. Points that coincide with a reference point use
/// that point's stored random-effect draws.
pub fn predict_new_points(
    samples: &PosteriorSamples,
    spec: &ModelSpec,
    points: &[SpaceTimePoint],
    x: &DMatrix<f64>,
    seed: u64,
) -> Result<PredictiveDraws> {
    check_samples(samples, spec)?;
    if x.nrows() != points.len() {
        return Err(Error::Dimension { expected: points.len(), got: x.nrows() });
    }
    if x.ncols() != spec.p() {
        return Err(Error::Dimension { expected: spec.p(), got: x.ncols() });
    }
    if let Some(k) = (0..points.len()).find(|&k| x.row(k).iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput(format!("target {k} has a missing covariate")));
    }
    let draws: Result<Vec<Vec<f64>>> = (0..points.len())
        .into_par_iter()
        .map(|k| {
            let p = &points[k];
            let mut rng = rng_for(seed, spec.r() + k);
            let latent: Vec<(f64, f64)> = match spec.reference.locate(p) {
                Some(i) => samples.draws.iter().map(|d| (if d.w.is_empty() { 0.0 } else { d.w[i] }, 0.0)).collect(),
                None => latent_conditionals(samples, spec, p)?,
            };
            let xr = x.row(k);
            Ok(samples
                .draws
                .iter()
                .zip(latent)
                .map(|(d, (mean, var))| {
                    let xb: f64 = xr.iter().zip(&d.beta).map(|(a, b)| a * b).sum();
                    let w = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
                    xb + w + d.tau2.sqrt() * rng.sample::<f64, _>(StandardNormal)
                })
                .collect())
        })
        .collect();
    Ok(PredictiveDraws { draws: draws? })
}
