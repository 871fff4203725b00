//! Synthetic data from the full (dense) Gaussian process and the dense
//! log density used as a reference for the sparse one.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceParams, Kernel};
use crate::error::{Error, Result};
use crate::process::JITTER;
use crate::spacetime::{ReferenceSet, SpaceTimePoint};

/// Default limit on the number of jointly simulated points.
pub const DENSE_CAP: usize = 5000;

const LN_2PI: f64 = 1.8378770664093453;

/// A regular grid over a box with a Gaussian-process response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Sites per spatial axis.
    pub n_side: usize,
    /// Spatial dimension.
    #[serde(default = "two")]
    pub dim: usize,
    pub n_times: usize,
    /// Spatial box `[lo, hi]` per axis.
    #[serde(default = "unit")]
    pub space: (f64, f64),
    /// Time interval.
    #[serde(default = "unit")]
    pub time: (f64, f64),
    pub theta: CovarianceParams,
    /// Coefficients; the first multiplies the intercept, the rest standard
    /// normal covariates.
    pub beta: Vec<f64>,
    pub tau2: f64,
    /// Uniformly scattered off-grid points.
    #[serde(default)]
    pub n_holdout: usize,
    pub seed: u64,
    #[serde(default = "cap")]
    pub dense_cap: usize,
}

fn two() -> usize {
    2
}
fn unit() -> (f64, f64) {
    (0.0, 1.0)
}
fn cap() -> usize {
    DENSE_CAP
}

impl SyntheticSpec {
    /// Grid of `n_side^2` sites by `n_times` times in the unit cube with the
    /// given truth.
    pub fn unit_cube(n_side: usize, n_times: usize, theta: CovarianceParams, beta: Vec<f64>, tau2: f64) -> Self {
        SyntheticSpec {
            n_side,
            dim: 2,
            n_times,
            space: (0.0, 1.0),
            time: (0.0, 1.0),
            theta,
            beta,
            tau2,
            n_holdout: 0,
            seed: 0,
            dense_cap: DENSE_CAP,
        }
    }

    pub fn n_reference(&self) -> usize {
        self.n_side.pow(self.dim as u32) * self.n_times
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_side == 0 || self.n_times == 0 || !(1..=3).contains(&self.dim) {
            return bad("grid needs at least one site and time and a dimension of 1 to 3".into());
        }
        if self.space.0.partial_cmp(&self.space.1) != Some(std::cmp::Ordering::Less)
            || self.time.0.partial_cmp(&self.time.1) != Some(std::cmp::Ordering::Less)
        {
            return bad("domain intervals must have lo < hi".into());
        }
        if self.beta.is_empty() {
            return bad("beta needs at least the intercept".into());
        }
        if !(self.tau2 >= 0.0) {
            return bad(format!("tau2 must be non-negative, got {}", self.tau2));
        }
        self.theta.validate()?;
        let n = self.n_reference() + self.n_holdout;
        if n > self.dense_cap {
            return bad(format!(
                "{n} points exceed the dense cap of {}; simulate larger fields with the sparse prior instead",
                self.dense_cap
            ));
        }
        Ok(())
    }

    /// The grid as a reference set.
    pub fn reference(&self) -> Result<ReferenceSet> {
        let axis = |n: usize, (lo, hi): (f64, f64)| -> Vec<f64> {
            if n == 1 {
                vec![0.5 * (lo + hi)]
            } else {
                (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
            }
        };
        let xs = axis(self.n_side, self.space);
        let mut sites: Vec<Vec<f64>> = vec![vec![]];
        for _ in 0..self.dim {
            sites = sites.into_iter().flat_map(|s| xs.iter().map(move |&v| [s.clone(), vec![v]].concat())).collect();
        }
        ReferenceSet::enumerate(&sites, &axis(self.n_times, self.time))
    }
}

/// Values at a set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub points: Vec<SpaceTimePoint>,
    /// Covariates including the intercept column.
    pub x: DMatrix<f64>,
    pub w: Vec<f64>,
    pub y: Vec<f64>,
}

/// A simulated grid and its off-grid holdout.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub reference: ReferenceSet,
    /// Aligned with the reference enumeration.
    pub grid: Observations,
    pub holdout: Observations,
}

/// Draws `w` jointly over the grid and holdout from the dense process, then
/// `y = X beta + w + noise`. Deterministic in the seed.
pub fn simulate_dataset(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let reference = spec.reference()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut holdout_points = Vec::with_capacity(spec.n_holdout);
    while holdout_points.len() < spec.n_holdout {
        let mut s = [0.0; 3];
        for v in s.iter_mut().take(spec.dim) {
            *v = rng.random_range(spec.space.0..spec.space.1);
        }
        let t = rng.random_range(spec.time.0..spec.time.1);
        let p = SpaceTimePoint::new(&s[..spec.dim], t)?;
        if reference.locate(&p).is_none() {
            holdout_points.push(p);
        }
    }
    let r = reference.len();
    let mut all = reference.points();
    all.extend_from_slice(&holdout_points);
    let n = all.len();
    let l = dense_cholesky(&all, &spec.theta)?;
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = l * z;
    let p = spec.beta.len();
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { f64::NAN });
    let mut x = x;
    for i in 0..n {
        for j in 1..p {
            x[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let sd = spec.tau2.sqrt();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let xb: f64 = (0..p).map(|j| x[(i, j)] * spec.beta[j]).sum();
            xb + w[i] + sd * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let split = |lo: usize, hi: usize, points: Vec<SpaceTimePoint>| Observations {
        points,
        x: x.rows(lo, hi - lo).into_owned(),
        w: w.as_slice()[lo..hi].to_vec(),
        y: y[lo..hi].to_vec(),
    };
    Ok(SyntheticData {
        grid: split(0, r, reference.points()),
        holdout: split(r, n, holdout_points),
        reference,
    })
}

/// Lower Cholesky factor of the dense covariance, with one jittered retry.
pub fn dense_cholesky(points: &[SpaceTimePoint], params: &CovarianceParams) -> Result<DMatrix<f64>> {
    let k = Kernel::new(params)?;
    let n = points.len();
    let mut c = DMatrix::from_fn(n, n, |i, j| k.cov_points(&points[i], &points[j]));
    if let Some(ch) = c.clone().cholesky() {
        return Ok(ch.l());
    }
    for i in 0..n {
        c[(i, i)] += JITTER * params.sigma2;
    }
    c.cholesky()
        .map(|ch| ch.l())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("dense covariance of {n} points")))
}

/// Exact `log N(w | 0, C(theta))` over the given points.
pub fn dense_gp_logdensity(w: &[f64], points: &[SpaceTimePoint], params: &CovarianceParams) -> Result<f64> {
    if w.len() != points.len() {
        return Err(Error::Dimension { expected: points.len(), got: w.len() });
    }
    if points.len() > DENSE_CAP {
        return Err(Error::InvalidInput(format!("{} points exceed the dense cap of {DENSE_CAP}", points.len())));
    }
    let l = dense_cholesky(points, params)?;
    let z = l
        .solve_lower_triangular(&DVector::from_column_slice(w))
        .ok_or_else(|| Error::NotPositiveDefinite("dense factor".into()))?;
    let logdet: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (w.len() as f64 * LN_2PI + logdet + z.norm_squared()))
}
