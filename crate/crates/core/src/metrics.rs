//! Model comparison and validation statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::{Draw, ModelSpec, PosteriorSamples};

/// Fit and validation summary of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    #[serde(rename = "pD")]
    pub p_d: f64,
    #[serde(rename = "DIC")]
    pub dic: f64,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "RMSPE")]
    pub rmspe: f64,
    pub coverage95: f64,
}

impl FitMetrics {
    /// Combines the in-sample statistics with holdout medians, 95% intervals
    /// and true values. Without holdout values RMSPE and coverage are NaN.
    pub fn compute(
        samples: &PosteriorSamples,
        spec: &ModelSpec,
        medians: &[f64],
        intervals: &[(f64, f64)],
        truth: &[f64],
    ) -> Result<Self> {
        let (p_d, dic) = dic(samples, spec)?;
        let (g, p, d) = predictive_loss(samples, spec)?;
        let (rmspe, coverage95) = if truth.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (rmspe(medians, truth)?, ci_coverage(intervals, truth)?)
        };
        Ok(FitMetrics { p_d, dic, g, p, d, rmspe, coverage95 })
    }
}

fn need_two(samples: &PosteriorSamples) -> Result<()> {
    if samples.len() < 2 {
        return Err(Error::TooFewDraws { needed: 2, have: samples.len() });
    }
    Ok(())
}

fn fitted(spec: &ModelSpec, i: usize, beta: &[f64], w: &[f64]) -> f64 {
    let xb: f64 = spec.x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum();
    xb + if w.is_empty() { 0.0 } else { w[i] }
}

/// `-2 log p(y_obs | beta, tau2, w)`.
fn deviance(spec: &ModelSpec, obs: &[usize], beta: &[f64], tau2: f64, w: &[f64]) -> f64 {
    let ss: f64 = obs
        .iter()
        .map(|&i| {
            let e = spec.y[i].unwrap() - fitted(spec, i, beta, w);
            e * e
        })
        .sum();
    obs.len() as f64 * (2.0 * std::f64::consts::PI * tau2).ln() + ss / tau2
}

/// `(pD, DIC)` with the plug-in deviance at the posterior means of `beta`,
/// `tau2` and `w`.
pub fn dic(samples: &PosteriorSamples, spec: &ModelSpec) -> Result<(f64, f64)> {
    need_two(samples)?;
    if spec.is_spatial() && !samples.has_w() {
        return Err(Error::InvalidInput("DIC needs stored random-effect draws".into()));
    }
    let obs = spec.observed();
    let n = samples.len() as f64;
    let devs: Vec<f64> = samples.draws.par_iter().map(|d| deviance(spec, &obs, &d.beta, d.tau2, &d.w)).collect();
    let d_bar = devs.iter().sum::<f64>() / n;
    let (beta, tau2, w) = posterior_means(&samples.draws);
    let d_hat = deviance(spec, &obs, &beta, tau2, &w);
    let p_d = d_bar - d_hat;
    Ok((p_d, d_bar + p_d))
}

fn posterior_means(draws: &[Draw]) -> (Vec<f64>, f64, Vec<f64>) {
    let n = draws.len() as f64;
    let mut beta = vec![0.0; draws[0].beta.len()];
    let mut w = vec![0.0; draws[0].w.len()];
    let mut tau2 = 0.0;
    for d in draws {
        beta.iter_mut().zip(&d.beta).for_each(|(a, b)| *a += b / n);
        w.iter_mut().zip(&d.w).for_each(|(a, b)| *a += b / n);
        tau2 += d.tau2 / n;
    }
    (beta, tau2, w)
}

/// `(G, P, D)`: squared error of the replicate means, total replicate
/// variance, and their sum, over observed points. Replicates are
/// `N(x' beta + w, tau2)` per stored draw; their moments are taken exactly
/// from the draw mixture.
pub fn predictive_loss(samples: &PosteriorSamples, spec: &ModelSpec) -> Result<(f64, f64, f64)> {
    need_two(samples)?;
    if spec.is_spatial() && !samples.has_w() {
        return Err(Error::InvalidInput("predictive loss needs stored random-effect draws".into()));
    }
    let n = samples.len() as f64;
    let mean_tau2 = samples.draws.iter().map(|d| d.tau2).sum::<f64>() / n;
    let (g, p) = spec
        .observed()
        .par_iter()
        .map(|&i| {
            let mu: Vec<f64> = samples.draws.iter().map(|d| fitted(spec, i, &d.beta, &d.w)).collect();
            let m = mu.iter().sum::<f64>() / n;
            let v = mu.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let e = spec.y[i].unwrap() - m;
            (e * e, v + mean_tau2)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0.0), |(g, p), (a, b)| (g + a, p + b));
    Ok((g, p, g + p))
}

/// Root mean squared prediction error.
pub fn rmspe(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Dimension { expected: truth.len(), got: predicted.len() });
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("RMSPE of an empty set".into()));
    }
    let ss: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / truth.len() as f64).sqrt())
}

/// Percent of true values inside their closed intervals.
pub fn ci_coverage(intervals: &[(f64, f64)], truth: &[f64]) -> Result<f64> {
    if intervals.len() != truth.len() {
        return Err(Error::Dimension { expected: truth.len(), got: intervals.len() });
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("coverage of an empty set".into()));
    }
    if let Some(&(lo, hi)) = intervals.iter().find(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::InvalidInput(format!("interval [{lo}, {hi}] is not ordered")));
    }
    let inside = intervals.iter().zip(truth).filter(|((lo, hi), t)| *lo <= **t && **t <= *hi).count();
    Ok(100.0 * inside as f64 / truth.len() as f64)
}
