//! Adaptive random-walk proposal on the unconstrained parameter scale.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::ChainDiagnostics;

const TARGET_ACCEPT: f64 = 0.35;
const INITIAL_SCALE: f64 = 0.1;
/// Burn-in iterations between refreshes of the proposal covariance.
const COV_REFRESH: usize = 100;
/// Burn-in iterations before the first covariance refresh.
const COV_START: usize = 200;

/// Metropolis proposal state for the transformed covariance parameters.
#[derive(Debug, Clone)]
pub(crate) struct Proposal {
    /// Lower Cholesky factor of the proposal shape, row-major `d x d`.
    chol: Vec<f64>,
    log_scale: f64,
    history: Vec<Vec<f64>>,
    shaped: bool,
    proposed: usize,
    accepted: usize,
    burn_proposed: usize,
    burn_accepted: usize,
}

impl Proposal {
    pub(crate) fn new(d: usize) -> Self {
        let mut chol = vec![0.0; d * d];
        for k in 0..d {
            chol[k * d + k] = 1.0;
        }
        Proposal {
            chol,
            log_scale: INITIAL_SCALE.ln(),
            history: Vec::new(),
            shaped: false,
            proposed: 0,
            accepted: 0,
            burn_proposed: 0,
            burn_accepted: 0,
        }
    }

    /// Refits the proposal shape to the second half of the burn-in history.
    fn reshape(&mut self, d: usize) {
        let h = &self.history[self.history.len() / 2..];
        let n = h.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| h.iter().map(|z| z[k]).sum::<f64>() / n).collect();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for z in h {
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += (z[a] - mean[a]) * (z[b] - mean[b]) / (n - 1.0);
                }
            }
        }
        for a in 0..d {
            cov[(a, a)] += 1e-6;
        }
        if let Some(ch) = cov.cholesky() {
            let l = ch.l();
            for a in 0..d {
                for b in 0..d {
                    self.chol[a * d + b] = l[(a, b)];
                }
            }
            if !self.shaped {
                self.log_scale = (2.38 / (d as f64).sqrt()).ln();
                self.shaped = true;
            }
        }
    }

    /// `z + scale * L eps` with standard normal `eps`.
    pub(crate) fn jump<R: Rng>(&self, z: &[f64], rng: &mut R) -> Vec<f64> {
        let d = z.len();
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let scale = self.log_scale.exp();
        (0..d).map(|a| z[a] + scale * (0..=a).map(|b| self.chol[a * d + b] * eps[b]).sum::<f64>()).collect()
    }

    /// Books one Metropolis step. During burn-in the scale moves toward the
    /// target acceptance rate and the shape is refit periodically.
    pub(crate) fn record(&mut self, adapt: bool, accept: bool, prob: f64, z_now: Vec<f64>) {
        if adapt {
            self.burn_proposed += 1;
            self.burn_accepted += accept as usize;
            let t = self.burn_proposed as f64;
            self.log_scale += (prob - TARGET_ACCEPT) / t.powf(0.6);
            let d = z_now.len();
            self.history.push(z_now);
            if self.burn_proposed >= COV_START && self.burn_proposed % COV_REFRESH == 0 {
                self.reshape(d);
            }
        } else {
            self.proposed += 1;
            self.accepted += accept as usize;
        }
    }

    pub(crate) fn counts(&self) -> (usize, usize) {
        (self.burn_proposed + self.proposed, self.burn_accepted + self.accepted)
    }

    pub(crate) fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub(crate) fn diagnostics(&self, chain: usize) -> ChainDiagnostics {
        let rate = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
        ChainDiagnostics {
            chain,
            burn_acceptance: rate(self.burn_accepted, self.burn_proposed),
            acceptance: rate(self.accepted, self.proposed),
            scale: self.scale(),
        }
    }
}
