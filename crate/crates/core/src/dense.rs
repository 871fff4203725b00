//! Full Gaussian process regression with a dense covariance matrix, for
//! comparison with the nearest-neighbor model at small sizes.
//!
//! The random effect is integrated out: `y_obs ~ N(X beta, C(theta) + tau2 I)`.
//! Each iteration draws `beta` from its Gaussian full conditional and then
//! takes one random-walk Metropolis step on `(theta, tau2)` jointly, with the
//! same proposal adaptation as the nearest-neighbor sampler. Predictions are
//! kriging draws per stored sample.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::covariance::{cross_cov_matrix, CovarianceParams};
use crate::error::{Error, Result};
use crate::mcmc::{
    values, BetaPrior, ChainDiagnostics, Draw, ModelSpec, PosteriorSamples, Proposal, Sampler, SamplerConfig,
    Transform,
};
use crate::predict::PredictiveDraws;
use crate::spacetime::SpaceTimePoint;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// The dense model on the observed points of a [`ModelSpec`].
pub struct DenseGp<'a> {
    spec: &'a ModelSpec,
    points: Vec<SpaceTimePoint>,
    y: DVector<f64>,
    x: DMatrix<f64>,
    /// Sampled components of `(sigma2, a, c, kappa, tau2)`.
    sampled: Vec<(usize, Transform)>,
    prior_precision: Option<DMatrix<f64>>,
    prior_shift: DVector<f64>,
}

/// Factor of `C(theta) + tau2 I` over the observed points.
pub struct Marginal {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

struct State {
    beta: Vec<f64>,
    tau2: f64,
    theta: CovarianceParams,
    marginal: Marginal,
    rng: ChaCha8Rng,
    proposal: Proposal,
}

impl<'a> DenseGp<'a> {
    pub fn new(spec: &'a ModelSpec) -> Result<Self> {
        spec.validate()?;
        if !spec.is_spatial() {
            return Err(Error::Config("the dense model needs a spatial random effect (m > 0)".into()));
        }
        let obs = spec.observed();
        if obs.is_empty() {
            return Err(Error::InvalidInput("no observed responses".into()));
        }
        let p = spec.p();
        let points: Vec<SpaceTimePoint> = obs.iter().map(|&i| spec.reference.point(i)).collect();
        let y = DVector::from_iterator(obs.len(), obs.iter().map(|&i| spec.y[i].unwrap()));
        let x = DMatrix::from_fn(obs.len(), p, |k, a| spec.x[(obs[k], a)]);
        let mut sampled: Vec<(usize, Transform)> = spec.priors.theta.sampled();
        if !spec.priors.tau2.as_prior().is_fixed() {
            sampled.push((4, Transform::Log));
        }
        let (prior_precision, prior_shift) = match &spec.priors.beta {
            BetaPrior::Flat => (None, DVector::zeros(p)),
            BetaPrior::Normal { mean, cov } => {
                let prec = DMatrix::from_row_slice(p, p, cov)
                    .cholesky()
                    .ok_or_else(|| Error::Config("beta prior covariance is not positive definite".into()))?
                    .inverse();
                let shift = &prec * DVector::from_column_slice(mean);
                (Some(prec), shift)
            }
        };
        Ok(DenseGp { spec, points, y, x, sampled, prior_precision, prior_shift })
    }

    pub fn n_obs(&self) -> usize {
        self.points.len()
    }

    /// Factors `C(theta) + tau2 I`; `None` when it is not positive definite.
    pub fn marginal(&self, theta: &CovarianceParams, tau2: f64) -> Result<Option<Marginal>> {
        let mut s = cross_cov_matrix(&self.points, &self.points, theta)?;
        for k in 0..s.nrows() {
            s[(k, k)] += tau2;
        }
        Ok(s.cholesky().map(|chol| {
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            Marginal { chol, log_det }
        }))
    }

    /// `log N(y_obs | X beta, C + tau2 I)`.
    pub fn log_likelihood(&self, m: &Marginal, beta: &[f64]) -> f64 {
        let e = &self.y - &self.x * DVector::from_column_slice(beta);
        let z = m.chol.l().solve_lower_triangular(&e).expect("triangular factor is invertible");
        -0.5 * (self.n_obs() as f64 * LN_2PI + m.log_det + z.norm_squared())
    }

    /// Mean and covariance of `beta` given `(theta, tau2)`.
    pub fn beta_conditional(&self, m: &Marginal) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let sx = m.chol.solve(&self.x);
        let mut prec = self.x.transpose() * &sx;
        let mut rhs = sx.transpose() * &self.y;
        if let Some(pp) = &self.prior_precision {
            prec += pp;
            rhs += &self.prior_shift;
        }
        let ch = prec.cholesky().ok_or_else(|| {
            Error::Singular("beta precision is singular; use a normal (ridge) prior on beta".into())
        })?;
        Ok((ch.solve(&rhs), ch.inverse()))
    }

    fn log_prior(&self, theta: &CovarianceParams, tau2: f64) -> f64 {
        self.spec.priors.theta.log_density(theta) + self.spec.priors.tau2.as_prior().log_density(tau2)
    }

    fn components(theta: &CovarianceParams, tau2: f64) -> [f64; 5] {
        let v = values(theta);
        [v[0], v[1], v[2], v[3], tau2]
    }

    fn init(&self, seed: u64, chain: usize) -> Result<State> {
        let (beta, tau2, theta) = Sampler::new(self.spec)?.starting_point()?;
        let marginal = self
            .marginal(&theta, tau2)?
            .ok_or_else(|| Error::NotPositiveDefinite("dense covariance at the starting point".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chain as u64);
        Ok(State { beta, tau2, theta, marginal, rng, proposal: Proposal::new(self.sampled.len()) })
    }

    fn update_beta(&self, st: &mut State) -> Result<()> {
        let (mean, cov) = self.beta_conditional(&st.marginal)?;
        let root = cov.cholesky().ok_or_else(|| Error::NotPositiveDefinite("beta conditional".into()))?.unpack();
        let z = DVector::from_fn(mean.len(), |_, _| st.rng.sample::<f64, _>(StandardNormal));
        st.beta = (mean + root * z).as_slice().to_vec();
        Ok(())
    }

    fn update_params(&self, st: &mut State, adapt: bool) -> Result<()> {
        let d = self.sampled.len();
        if d == 0 {
            return Ok(());
        }
        let cur = Self::components(&st.theta, st.tau2);
        let z: Vec<f64> = self.sampled.iter().map(|(k, t)| t.forward(cur[*k])).collect();
        let z_next = st.proposal.jump(&z, &mut st.rng);
        let mut next = cur;
        for (a, (k, t)) in self.sampled.iter().enumerate() {
            next[*k] = t.inverse(z_next[a]);
        }
        let theta = CovarianceParams { sigma2: next[0], a: next[1], c: next[2], kappa: next[3], ..st.theta };
        let tau2 = next[4];
        let prior_next = if theta.validate().is_ok() { self.log_prior(&theta, tau2) } else { f64::NEG_INFINITY };
        let outcome = if prior_next == f64::NEG_INFINITY { None } else { self.marginal(&theta, tau2)? };
        let u: f64 = st.rng.random();
        let (accept, prob) = match outcome {
            Some(m) => {
                let jac = |v: &[f64; 5]| self.sampled.iter().map(|(k, t)| t.log_jacobian(v[*k])).sum::<f64>();
                let ratio = self.log_likelihood(&m, &st.beta) + prior_next + jac(&next)
                    - self.log_likelihood(&st.marginal, &st.beta)
                    - self.log_prior(&st.theta, st.tau2)
                    - jac(&cur);
                let prob = if ratio.is_nan() { 0.0 } else { ratio.min(0.0).exp() };
                if u.ln() < ratio {
                    st.theta = theta;
                    st.tau2 = tau2;
                    st.marginal = m;
                    (true, prob)
                } else {
                    (false, prob)
                }
            }
            None => (false, 0.0),
        };
        let now = Self::components(&st.theta, st.tau2);
        let z_now = self.sampled.iter().map(|(k, t)| t.forward(now[*k])).collect();
        st.proposal.record(adapt, accept, prob, z_now);
        Ok(())
    }

    fn run_chain(&self, config: &SamplerConfig, chain: usize) -> Result<(Vec<Draw>, ChainDiagnostics)> {
        let mut st = self.init(config.seed, chain)?;
        let mut draws = Vec::with_capacity(config.kept_per_chain());
        for it in 0..config.n_iter {
            let burning = it < config.n_burn;
            self.update_beta(&mut st)?;
            self.update_params(&mut st, burning)?;
            if st.beta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("iteration {it}: beta = {:?}", st.beta)));
            }
            if !burning && (it - config.n_burn) % config.thin == 0 {
                draws.push(Draw { chain, iter: it, beta: st.beta.clone(), tau2: st.tau2, theta: st.theta, w: Vec::new() });
            }
        }
        Ok((draws, st.proposal.diagnostics(chain)))
    }

    /// Runs the chains; stored draws carry no random effect.
    pub fn fit(&self, config: &SamplerConfig) -> Result<PosteriorSamples> {
        config.validate()?;
        let results: Vec<Result<(Vec<Draw>, ChainDiagnostics)>> =
            (0..config.n_chains).into_par_iter().map(|c| self.run_chain(config, c)).collect();
        let mut draws = Vec::new();
        let mut diagnostics = Vec::new();
        for res in results {
            let (d, diag) = res?;
            draws.extend(d);
            diagnostics.push(diag);
        }
        Ok(PosteriorSamples { p: self.spec.p(), r: self.spec.r(), draws, diagnostics })
    }

    /// Per-draw kriging mean and variance of `y` at `points` (nugget included).
    pub fn kriging(
        &self,
        draw: &Draw,
        m: &Marginal,
        points: &[SpaceTimePoint],
        x: &DMatrix<f64>,
    ) -> Result<Vec<(f64, f64)>> {
        let beta = DVector::from_column_slice(&draw.beta);
        let alpha = m.chol.solve(&(&self.y - &self.x * &beta));
        let c0 = cross_cov_matrix(&self.points, points, &draw.theta)?;
        let half = m.chol.l().solve_lower_triangular(&c0).expect("triangular factor is invertible");
        let xb = x * &beta;
        Ok((0..points.len())
            .map(|k| {
                let mean = xb[k] + c0.column(k).dot(&alpha);
                let var = draw.theta.sigma2 + draw.tau2 - half.column(k).norm_squared();
                (mean, var.max(0.0))
            })
            .collect())
    }

    /// Posterior predictive draws of `y` at `points`, one per stored sample.
    pub fn predict(
        &self,
        samples: &PosteriorSamples,
        points: &[SpaceTimePoint],
        x: &DMatrix<f64>,
        seed: u64,
    ) -> Result<PredictiveDraws> {
        if samples.is_empty() {
            return Err(Error::TooFewDraws { needed: 1, have: 0 });
        }
        if x.nrows() != points.len() || x.ncols() != self.spec.p() {
            return Err(Error::Dimension { expected: points.len() * self.spec.p(), got: x.nrows() * x.ncols() });
        }
        let mut rngs: Vec<ChaCha8Rng> = (0..points.len())
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                rng
            })
            .collect();
        let mut out = vec![Vec::with_capacity(samples.len()); points.len()];
        let mut cached: Option<(CovarianceParams, f64, Marginal)> = None;
        for d in &samples.draws {
            let reuse = matches!(&cached, Some((th, t2, _)) if *th == d.theta && *t2 == d.tau2);
            if !reuse {
                let m = self
                    .marginal(&d.theta, d.tau2)?
                    .ok_or_else(|| Error::NotPositiveDefinite("dense covariance of a stored draw".into()))?;
                cached = Some((d.theta, d.tau2, m));
            }
            let m = &cached.as_ref().unwrap().2;
            for (k, (mean, var)) in self.kriging(d, m, points, x)?.into_iter().enumerate() {
                out[k].push(mean + var.sqrt() * rngs[k].sample::<f64, _>(StandardNormal));
            }
        }
        Ok(PredictiveDraws { draws: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::dense_gp_logdensity;
    use crate::mcmc::{Priors, Tau2Prior};
    use crate::spacetime::ReferenceSet;

    fn spec() -> ModelSpec {
        let locs: Vec<Vec<f64>> =
            (0..3).flat_map(|i| (0..3).map(move |j| vec![i as f64 / 2.0, j as f64 / 2.0])).collect();
        let reference = ReferenceSet::enumerate(&locs, &[0.0, 0.5, 1.0]).unwrap();
        let r = reference.len();
        let x = DMatrix::from_fn(r, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 * 0.77).sin() });
        let y = (0..r).map(|i| (i % 4 != 1).then(|| 1.0 + 2.0 * x[(i, 1)] + (i as f64 * 1.3).cos())).collect();
        ModelSpec::new(reference, x, y, 8).unwrap()
    }

    fn theta() -> CovarianceParams {
        CovarianceParams::exponential(1.2, 10.0, 2.0, 0.6).unwrap()
    }

    #[test]
    fn likelihood_matches_dense_density() {
        let s = spec();
        let g = DenseGp::new(&s).unwrap();
        let th = theta();
        let tau2 = 0.3;
        let m = g.marginal(&th, tau2).unwrap().unwrap();
        let beta = [0.5, 1.5];
        let e: Vec<f64> = (0..g.n_obs()).map(|k| g.y[k] - g.x[(k, 0)] * beta[0] - g.x[(k, 1)] * beta[1]).collect();
        let mut s_mat = cross_cov_matrix(&g.points, &g.points, &th).unwrap();
        for k in 0..g.n_obs() {
            s_mat[(k, k)] += tau2;
        }
        let ch = s_mat.clone().cholesky().unwrap();
        let ev = DVector::from_column_slice(&e);
        let quad = ev.dot(&ch.solve(&ev));
        let want = -0.5 * (g.n_obs() as f64 * LN_2PI + s_mat.determinant().ln() + quad);
        assert!((g.log_likelihood(&m, &beta) - want).abs() < 1e-9);
        // tau2 -> 0 recovers the process density
        let m0 = g.marginal(&th, 1e-12).unwrap().unwrap();
        let want0 = dense_gp_logdensity(&e, &g.points, &th).unwrap();
        assert!((g.log_likelihood(&m0, &beta) - want0).abs() < 1e-4);
    }

    #[test]
    fn beta_conditional_is_gls() {
        let s = spec();
        let g = DenseGp::new(&s).unwrap();
        let m = g.marginal(&theta(), 0.2).unwrap().unwrap();
        let (mean, cov) = g.beta_conditional(&m).unwrap();
        let mut sig = cross_cov_matrix(&g.points, &g.points, &theta()).unwrap();
        for k in 0..g.n_obs() {
            sig[(k, k)] += 0.2;
        }
        let si = sig.try_inverse().unwrap();
        let v = (g.x.transpose() * &si * &g.x).try_inverse().unwrap();
        let b = &v * g.x.transpose() * &si * &g.y;
        assert!((mean - b).amax() < 1e-8);
        assert!((cov - v).amax() < 1e-8);
    }

    #[test]
    fn kriging_interpolates_without_nugget() {
        let s = spec();
        let g = DenseGp::new(&s).unwrap();
        let th = theta();
        let m = g.marginal(&th, 1e-10).unwrap().unwrap();
        let d = Draw { chain: 0, iter: 0, beta: vec![1.0, 2.0], tau2: 1e-10, theta: th, w: vec![] };
        let x = DMatrix::from_fn(1, 2, |k, a| g.x[(k + 3, a)]);
        let kr = g.kriging(&d, &m, &[g.points[3]], &x).unwrap();
        assert!((kr[0].0 - g.y[3]).abs() < 1e-5);
        assert!(kr[0].1 < 1e-6);
    }

    #[test]
    fn fit_is_reproducible_and_moves() {
        let s = spec()
            .with_priors(Priors { tau2: Tau2Prior::InverseGamma { shape: 2.0, rate: 0.5 }, ..Priors::default() })
            .unwrap();
        let g = DenseGp::new(&s).unwrap();
        let cfg = SamplerConfig { n_iter: 400, n_burn: 200, n_chains: 2, seed: 9, thin: 2, store_w: false };
        let a = g.fit(&cfg).unwrap();
        let b = g.fit(&cfg).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.len(), 200);
        assert!(a.diagnostics.iter().all(|d| d.acceptance > 0.05));
        let pts = [SpaceTimePoint::new(&[0.3, 0.3], 0.3).unwrap()];
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.2]);
        let p = g.predict(&a, &pts, &x, 1).unwrap();
        assert_eq!(p.draws[0].len(), 200);
        assert!(p.draws[0].iter().all(|v| v.is_finite()));
    }
}
