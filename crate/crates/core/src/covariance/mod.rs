//! Non-separable Gneiting space-time covariance functions.
//!
//! With `g(u) = a |u|^(2 alpha) + 1` the Matérn form is
//!
//! ```text
//! C(h, u) = sigma2 / (2^(nu-1) Gamma(nu) g^(delta+kappa)) * x^nu K_nu(x),
//!     x = c h / g^(kappa/2)
//! ```
//!
//! and the exponential form is its `nu = 1/2, alpha = 1, delta = 0` member,
//! `sigma2 g^(-kappa) exp(-c h g^(-kappa/2))`. `kappa` controls the
//! space-time interaction; `kappa = 0` is separable.
//!
//! Note that the exponential form is not naturally monotone over every lag
//! range: `d log C / d log g = kappa (c h g^(-kappa/2) / 2 - 1)`, so it
//! increases with the temporal lag wherever `c h g^(-kappa/2) > 2`. It is
//! monotone over any spatial range with `c h <= 2`.

mod bessel;

pub use bessel::bessel_k;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::spacetime::{site_distance, ReferenceSet, SpaceTimePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceForm {
    Matern,
    Exponential,
}

/// Parameters of the Gneiting covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    /// Marginal variance.
    pub sigma2: f64,
    /// Temporal decay.
    pub a: f64,
    /// Spatial decay.
    pub c: f64,
    /// Space-time interaction, in `[0, 1]`.
    pub kappa: f64,
    /// Temporal smoothness, in `(0, 1]`.
    pub alpha: f64,
    /// Spatial (Matérn) smoothness.
    pub nu: f64,
    /// Extra power on the temporal term.
    pub delta: f64,
    pub form: CovarianceForm,
}

impl CovarianceParams {
    /// Exponential form with `(sigma2, a, c, kappa)`.
    pub fn exponential(sigma2: f64, a: f64, c: f64, kappa: f64) -> Result<Self> {
        let p = CovarianceParams {
            sigma2,
            a,
            c,
            kappa,
            alpha: 1.0,
            nu: 0.5,
            delta: 0.0,
            form: CovarianceForm::Exponential,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn matern(sigma2: f64, a: f64, c: f64, kappa: f64, alpha: f64, nu: f64, delta: f64) -> Result<Self> {
        let p = CovarianceParams { sigma2, a, c, kappa, alpha, nu, delta, form: CovarianceForm::Matern };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParams(format!("{what} (got {self:?})")));
        let all = [self.sigma2, self.a, self.c, self.kappa, self.alpha, self.nu, self.delta];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("all parameters must be finite");
        }
        if self.sigma2 <= 0.0 {
            return bad("sigma2 must be positive");
        }
        if self.a <= 0.0 {
            return bad("a must be positive");
        }
        if self.c <= 0.0 {
            return bad("c must be positive");
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad("kappa must lie in [0, 1]");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if self.nu <= 0.0 {
            return bad("nu must be positive");
        }
        if self.delta < 0.0 {
            return bad("delta must be non-negative");
        }
        if self.form == CovarianceForm::Exponential && (self.nu != 0.5 || self.alpha != 1.0 || self.delta != 0.0) {
            return bad("exponential form implies nu = 0.5, alpha = 1, delta = 0");
        }
        Ok(())
    }

    /// The same parameters with the covariance form switched to Matérn.
    pub fn as_matern(&self) -> Self {
        CovarianceParams { form: CovarianceForm::Matern, ..*self }
    }
}

/// Temporal part of the covariance at one temporal lag: the amplitude
/// `sigma2 g^-(delta+kappa)` and the effective spatial decay `c g^(-kappa/2)`.
#[derive(Debug, Clone, Copy)]
pub struct TemporalFactor {
    amp: f64,
    decay: f64,
}

/// A validated kernel with its per-form constants precomputed.
#[derive(Debug, Clone, Copy)]
pub struct Kernel {
    params: CovarianceParams,
    /// `-ln(2^(nu-1) Gamma(nu))`, Matérn form only.
    log_norm: f64,
}

impl Kernel {
    pub fn new(params: &CovarianceParams) -> Result<Self> {
        params.validate()?;
        let log_norm = match params.form {
            CovarianceForm::Exponential => 0.0,
            CovarianceForm::Matern => -((params.nu - 1.0) * std::f64::consts::LN_2 + ln_gamma(params.nu)),
        };
        Ok(Kernel { params: *params, log_norm })
    }

    pub fn params(&self) -> &CovarianceParams {
        &self.params
    }

    pub fn sigma2(&self) -> f64 {
        self.params.sigma2
    }

    #[inline]
    pub fn temporal(&self, u: f64) -> TemporalFactor {
        let p = &self.params;
        if u == 0.0 {
            return TemporalFactor { amp: p.sigma2, decay: p.c };
        }
        let g = match p.form {
            CovarianceForm::Exponential => p.a * u * u + 1.0,
            CovarianceForm::Matern => p.a * u.powf(2.0 * p.alpha) + 1.0,
        };
        let lg = g.ln();
        TemporalFactor {
            amp: p.sigma2 * (-(p.delta + p.kappa) * lg).exp(),
            decay: p.c * (-0.5 * p.kappa * lg).exp(),
        }
    }

    /// Spatial correlation at scaled lag `x = c h g^(-kappa/2)`.
    #[inline]
    pub fn spatial_corr(&self, x: f64) -> f64 {
        if x == 0.0 {
            return 1.0;
        }
        match self.params.form {
            CovarianceForm::Exponential => (-x).exp(),
            CovarianceForm::Matern => {
                let nu = self.params.nu;
                let v = (self.log_norm + nu * x.ln()).exp() * bessel_k(nu, x);
                if v.is_finite() {
                    v.min(1.0)
                } else {
                    // x^nu K_nu(x) overflowed; the limit at the origin is 1.
                    1.0
                }
            }
        }
    }

    #[inline]
    pub fn cov_with(&self, h: f64, tf: TemporalFactor) -> f64 {
        tf.amp * self.spatial_corr(h * tf.decay)
    }

    /// `C(h, u)` without argument validation.
    #[inline]
    pub fn cov(&self, h: f64, u: f64) -> f64 {
        self.cov_with(h, self.temporal(u))
    }

    #[inline]
    pub fn cov_points(&self, p: &SpaceTimePoint, q: &SpaceTimePoint) -> f64 {
        self.cov(p.spatial_lag(q), p.temporal_lag(q))
    }
}

/// `C(h, u | theta)`.
pub fn cov(h: f64, u: f64, params: &CovarianceParams) -> Result<f64> {
    if !(h.is_finite() && u.is_finite()) || h < 0.0 || u < 0.0 {
        return Err(Error::InvalidInput(format!("lags must be finite and non-negative (h={h}, u={u})")));
    }
    Ok(Kernel::new(params)?.cov(h, u))
}

/// The `|A| x |B|` matrix of covariances between two point lists.
pub fn cross_cov_matrix(a: &[SpaceTimePoint], b: &[SpaceTimePoint], params: &CovarianceParams) -> Result<DMatrix<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("cross_cov_matrix needs non-empty point lists".into()));
    }
    let k = Kernel::new(params)?;
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| k.cov_points(&a[i], &b[j])))
}

/// Whether `C` is non-increasing in `h` for each `u` of the grid and in `u`
/// for each `h`. Both grids must be sorted ascending.
pub fn check_natural_monotonicity(params: &CovarianceParams, h_grid: &[f64], u_grid: &[f64]) -> bool {
    let Ok(k) = Kernel::new(params) else {
        return false;
    };
    let table: Vec<Vec<f64>> = u_grid.iter().map(|&u| h_grid.iter().map(|&h| k.cov(h, u)).collect()).collect();
    // relative slack for rounding in otherwise flat directions
    let le = |x: f64, y: f64| x <= y + 1e-14 * y.abs();
    for row in &table {
        if row.windows(2).any(|w| !le(w[1], w[0])) {
            return false;
        }
    }
    for col in 0..h_grid.len() {
        if table.windows(2).any(|w| !le(w[1][col], w[0][col])) {
            return false;
        }
    }
    true
}

/// Covariances between reference points, with the temporal factors of an
/// equally spaced time axis tabulated once per parameter value.
#[derive(Debug, Clone)]
pub struct ReferenceCovariance<'a> {
    kernel: Kernel,
    reference: &'a ReferenceSet,
    lag_table: Option<Vec<TemporalFactor>>,
}

impl<'a> ReferenceCovariance<'a> {
    pub fn new(reference: &'a ReferenceSet, params: &CovarianceParams) -> Result<Self> {
        let kernel = Kernel::new(params)?;
        let times = reference.times();
        let lag_table = if equally_spaced(times) {
            Some(times.iter().map(|&t| kernel.temporal(t - times[0])).collect())
        } else {
            None
        };
        Ok(ReferenceCovariance { kernel, reference, lag_table })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn reference(&self) -> &ReferenceSet {
        self.reference
    }

    #[inline]
    fn temporal_between(&self, ti: usize, tj: usize) -> TemporalFactor {
        match &self.lag_table {
            Some(tab) => tab[ti.abs_diff(tj)],
            None => {
                let t = self.reference.times();
                self.kernel.temporal((t[ti] - t[tj]).abs())
            }
        }
    }

    /// Covariance between reference points `i` and `j`.
    #[inline]
    pub fn between(&self, i: usize, j: usize) -> f64 {
        let r = self.reference;
        let tf = self.temporal_between(r.time_of(i), r.time_of(j));
        self.kernel.cov_with(site_distance(r.site(i), r.site(j)), tf)
    }

    /// Covariance between an arbitrary point and reference point `j`.
    #[inline]
    pub fn with_point(&self, p: &SpaceTimePoint, j: usize) -> f64 {
        self.kernel.cov_points(p, &self.reference.point(j))
    }
}

fn equally_spaced(times: &[f64]) -> bool {
    if times.len() < 3 {
        return true;
    }
    let step = times[1] - times[0];
    times.windows(2).all(|w| ((w[1] - w[0]) - step).abs() <= 1e-12 * step.abs())
}
