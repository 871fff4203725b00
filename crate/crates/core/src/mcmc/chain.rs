//! One Markov chain: state, full-conditional updates and the Metropolis step.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::prior::{values, BetaPrior, Tau2Prior, Transform};
use super::proposal::Proposal;
use super::{ChainDiagnostics, Draw, ModelSpec, SamplerConfig};
use crate::covariance::{CovarianceParams, ReferenceCovariance};
use crate::error::{Error, Result};
use crate::neighbors::{adaptive_with, build_eligible_sets, simple_neighbors, EligibleSets, NeighborTable, Scheme};
use crate::process::{factors_with, log_prior_density, SparseFactors};

/// Reverse neighbor lists: for each point `i`, the points `l` with
/// `i in N(l)` and the position of `i`'s weight in the flat weight array.
#[derive(Debug, Clone)]
struct Reverse {
    offsets: Vec<usize>,
    target: Vec<u32>,
    slot: Vec<u32>,
}

impl Reverse {
    fn build(factors: &SparseFactors) -> Self {
        let r = factors.len();
        let mut counts = vec![0usize; r + 1];
        for l in 0..r {
            for &j in factors.neighbors(l) {
                counts[j as usize + 1] += 1;
            }
        }
        for i in 0..r {
            counts[i + 1] += counts[i];
        }
        let total = counts[r];
        let mut fill = counts.clone();
        let mut target = vec![0u32; total];
        let mut slot = vec![0u32; total];
        for l in 0..r {
            let base = factors.offset(l);
            for (pos, &j) in factors.neighbors(l).iter().enumerate() {
                let at = fill[j as usize];
                target[at] = l as u32;
                slot[at] = (base + pos) as u32;
                fill[j as usize] += 1;
            }
        }
        Reverse { offsets: counts, target, slot }
    }

    #[inline]
    fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// State of one chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub beta: Vec<f64>,
    pub tau2: f64,
    pub theta: CovarianceParams,
    pub w: Vec<f64>,
    /// Factors under the current `theta` and neighbor sets.
    pub factors: SparseFactors,
    /// Completed iterations.
    pub iteration: usize,
    rng: ChaCha8Rng,
    reverse: Arc<Reverse>,
    /// `sum over l in U(i) of b_{l,i}^2 / f_l`.
    reverse_precision: Vec<f64>,
    /// `log p(w | theta)` for the current state.
    log_w: f64,
    proposal: Proposal,
}

impl ChainState {
    pub fn table(&self) -> &Arc<NeighborTable> {
        self.factors.table()
    }

    /// Metropolis proposals and acceptances so far, burn-in included.
    pub fn metropolis_counts(&self) -> (usize, usize) {
        self.proposal.counts()
    }

    /// Current proposal scale.
    pub fn proposal_scale(&self) -> f64 {
        self.proposal.scale()
    }

    fn set_factors(&mut self, factors: SparseFactors) {
        if !Arc::ptr_eq(factors.table(), self.factors.table()) || self.reverse.target.is_empty() {
            self.reverse = Arc::new(Reverse::build(&factors));
        }
        self.factors = factors;
        self.refresh_reverse_precision();
    }

    fn refresh_reverse_precision(&mut self) {
        let f = &self.factors;
        let mut u = vec![0.0; f.len()];
        for l in 0..f.len() {
            let fl = f.cond_var(l);
            for (&j, b) in f.neighbors(l).iter().zip(f.weights(l)) {
                u[j as usize] += b * b / fl;
            }
        }
        self.reverse_precision = u;
    }
}

/// Read-only quantities shared by all chains of one model.
pub struct Sampler<'a> {
    spec: &'a ModelSpec,
    observed: Vec<usize>,
    is_observed: Vec<bool>,
    y: Vec<f64>,
    /// `X'X` over observed rows.
    xtx: DMatrix<f64>,
    prior_precision: Option<DMatrix<f64>>,
    prior_shift: DVector<f64>,
    eligible: Option<Arc<EligibleSets>>,
    /// Neighbor sets of the simple scheme, or under the default initial
    /// parameters for the adaptive one.
    initial_table: Option<Arc<NeighborTable>>,
    sampled: Vec<(usize, Transform)>,
}

impl<'a> Sampler<'a> {
    pub fn new(spec: &'a ModelSpec) -> Result<Self> {
        spec.validate()?;
        let r = spec.r();
        let p = spec.p();
        let observed = spec.observed();
        let mut is_observed = vec![false; r];
        for &i in &observed {
            is_observed[i] = true;
        }
        let y: Vec<f64> = spec.y.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        for &i in &observed {
            let row = spec.x.row(i);
            for a in 0..p {
                for b in 0..p {
                    xtx[(a, b)] += row[a] * row[b];
                }
            }
        }
        let (prior_precision, prior_shift) = match &spec.priors.beta {
            BetaPrior::Flat => (None, DVector::zeros(p)),
            BetaPrior::Normal { mean, cov } => {
                let c = DMatrix::from_row_slice(p, p, cov);
                let prec = c
                    .cholesky()
                    .ok_or_else(|| Error::Config("beta prior covariance is not positive definite".into()))?
                    .inverse();
                let shift = &prec * DVector::from_column_slice(mean);
                (Some(prec), shift)
            }
        };
        if prior_precision.is_none() && xtx.clone().cholesky().is_none() {
            return Err(Error::Singular(
                "X'X over the observed rows is singular under a flat beta prior; use a normal (ridge) prior on beta"
                    .into(),
            ));
        }
        let (eligible, initial_table) = if spec.is_spatial() {
            match spec.scheme {
                Scheme::Simple => (None, Some(Arc::new(simple_neighbors(&spec.reference, spec.m)?))),
                Scheme::Adaptive => (Some(Arc::new(build_eligible_sets(&spec.reference, spec.m)?)), None),
            }
        } else {
            (None, None)
        };
        let sampled = if spec.is_spatial() { spec.priors.theta.sampled() } else { Vec::new() };
        Ok(Sampler {
            spec,
            observed,
            is_observed,
            y,
            xtx,
            prior_precision,
            prior_shift,
            eligible,
            initial_table,
            sampled,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    fn table_for(&self, rc: &ReferenceCovariance<'_>) -> Arc<NeighborTable> {
        match (&self.eligible, &self.initial_table) {
            (Some(e), _) => Arc::new(adaptive_with(e, rc, self.spec.m)),
            (None, Some(t)) => Arc::clone(t),
            (None, None) => Arc::new(NeighborTable::empty(self.spec.r())),
        }
    }

    /// Factors under `theta`, with neighbor sets rebuilt when adaptive.
    pub fn factors_for(&self, theta: &CovarianceParams) -> Result<SparseFactors> {
        let rc = ReferenceCovariance::new(&self.spec.reference, theta)?;
        let table = self.table_for(&rc);
        factors_with(&rc, &table)
    }

    fn ols(&self) -> (Vec<f64>, f64) {
        let p = self.spec.p();
        let mut xty = DVector::<f64>::zeros(p);
        for &i in &self.observed {
            for a in 0..p {
                xty[a] += self.spec.x[(i, a)] * self.y[i];
            }
        }
        let mut prec = self.xtx.clone();
        if let Some(pp) = &self.prior_precision {
            prec += pp;
            xty += &self.prior_shift;
        }
        let beta = match prec.cholesky() {
            Some(ch) => ch.solve(&xty),
            None => DVector::zeros(p),
        };
        let n = self.observed.len();
        let ss: f64 = self.observed.iter().map(|&i| (self.y[i] - self.xb(i, beta.as_slice())).powi(2)).sum();
        let var = if n > p { ss / (n - p) as f64 } else { f64::NAN };
        (beta.as_slice().to_vec(), var)
    }

    #[inline]
    fn xb(&self, i: usize, beta: &[f64]) -> f64 {
        let row = self.spec.x.row(i);
        row.iter().zip(beta).map(|(x, b)| x * b).sum()
    }

    /// A chain at the default (or configured) starting point.
    pub fn init_chain(&self, seed: u64, chain: usize) -> Result<ChainState> {
        let (beta, tau2, theta) = self.starting_point()?;
        let w = self.spec.init.w.clone().unwrap_or_else(|| vec![0.0; self.spec.r()]);
        self.chain_at(beta, tau2, theta, w, seed, chain)
    }

    /// Configured or default starting values of `beta`, `tau2` and `theta`.
    pub(crate) fn starting_point(&self) -> Result<(Vec<f64>, f64, CovarianceParams)> {
        let init = &self.spec.init;
        let (ols_beta, ols_var) = self.ols();
        let beta = init.beta.clone().unwrap_or(ols_beta);
        let tau2 = match (init.tau2, self.spec.priors.tau2) {
            (Some(t), _) => t,
            (None, Tau2Prior::Fixed { value }) => value,
            (None, prior) => {
                if ols_var.is_finite() && ols_var > 0.0 {
                    0.5 * ols_var
                } else {
                    prior.as_prior().initial()
                }
            }
        };
        let theta = match init.theta {
            Some(t) => t,
            // unused without a random effect
            None if !self.spec.is_spatial() => CovarianceParams::exponential(1.0, 1.0, 1.0, 0.0)?,
            None => {
                let th = &self.spec.priors.theta;
                th.params(&th.initial_values())?
            }
        };
        Ok((beta, tau2, theta))
    }

    /// A chain at an explicit state.
    pub fn chain_at(
        &self,
        beta: Vec<f64>,
        tau2: f64,
        theta: CovarianceParams,
        w: Vec<f64>,
        seed: u64,
        chain: usize,
    ) -> Result<ChainState> {
        if beta.len() != self.spec.p() {
            return Err(Error::Dimension { expected: self.spec.p(), got: beta.len() });
        }
        if w.len() != self.spec.r() {
            return Err(Error::Dimension { expected: self.spec.r(), got: w.len() });
        }
        if !(tau2 > 0.0) {
            return Err(Error::InvalidInput(format!("tau2 must be positive, got {tau2}")));
        }
        theta.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chain as u64);
        let factors = if self.spec.is_spatial() {
            self.factors_for(&theta)?
        } else {
            let rc = ReferenceCovariance::new(&self.spec.reference, &theta)?;
            factors_with(&rc, &Arc::new(NeighborTable::empty(self.spec.r())))?
        };
        let log_w = if self.spec.is_spatial() { log_prior_density(&w, &factors)? } else { 0.0 };
        let mut state = ChainState {
            beta,
            tau2,
            theta,
            w: if self.spec.is_spatial() { w } else { vec![0.0; self.spec.r()] },
            factors: factors.clone(),
            iteration: 0,
            rng,
            reverse: Arc::new(Reverse { offsets: vec![], target: vec![], slot: vec![] }),
            reverse_precision: Vec::new(),
            log_w,
            proposal: Proposal::new(self.sampled.len()),
        };
        state.set_factors(factors);
        Ok(state)
    }

    /// Mean and covariance of `beta | rest`.
    pub fn beta_conditional(&self, st: &ChainState) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (mean, l) = self.beta_conditional_chol(st)?;
        let cov = &l * l.transpose();
        Ok((mean, cov))
    }

    /// Mean and the lower Cholesky factor of the covariance.
    fn beta_conditional_chol(&self, st: &ChainState) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = self.spec.p();
        let mut rhs = DVector::<f64>::zeros(p);
        for &i in &self.observed {
            let e = self.y[i] - st.w[i];
            for a in 0..p {
                rhs[a] += self.spec.x[(i, a)] * e;
            }
        }
        rhs /= st.tau2;
        let mut prec = &self.xtx / st.tau2;
        if let Some(pp) = &self.prior_precision {
            prec += pp;
            rhs += &self.prior_shift;
        }
        let ch = prec.cholesky().ok_or_else(|| {
            Error::Singular("beta precision is singular; use a normal (ridge) prior on beta".into())
        })?;
        let mean = ch.solve(&rhs);
        // cov = P^-1 = L'^-1 L^-1, so L'^-1 is a valid square root
        let linv = ch.l().solve_lower_triangular(&DMatrix::identity(p, p)).expect("triangular factor is invertible");
        Ok((mean, linv.transpose()))
    }

    pub fn update_beta(&self, st: &mut ChainState) -> Result<()> {
        let (mean, root) = self.beta_conditional_chol(st)?;
        let z = DVector::from_fn(self.spec.p(), |_, _| st.rng.sample::<f64, _>(StandardNormal));
        let draw = mean + root * z;
        st.beta = draw.as_slice().to_vec();
        Ok(())
    }

    /// `(shape, rate)` of the inverse gamma full conditional of `tau2`, or
    /// `None` when `tau2` is fixed.
    pub fn tau2_conditional(&self, st: &ChainState) -> Option<(f64, f64)> {
        match self.spec.priors.tau2 {
            Tau2Prior::Fixed { .. } => None,
            Tau2Prior::InverseGamma { shape, rate } => {
                let ss: f64 =
                    self.observed.iter().map(|&i| (self.y[i] - self.xb(i, &st.beta) - st.w[i]).powi(2)).sum();
                Some((shape + 0.5 * self.observed.len() as f64, rate + 0.5 * ss))
            }
        }
    }

    pub fn update_tau2(&self, st: &mut ChainState) -> Result<()> {
        if let Some((shape, rate)) = self.tau2_conditional(st) {
            let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::NonFinite(format!("tau2 conditional: {e}")))?;
            st.tau2 = 1.0 / g.sample(&mut st.rng);
        }
        Ok(())
    }

    /// Residuals `e_l = w_l - a_l' w_N(l)` for the current state.
    fn residuals(st: &ChainState) -> Vec<f64> {
        (0..st.w.len()).map(|l| st.w[l] - st.factors.cond_mean(l, &st.w)).collect()
    }

    #[inline]
    fn w_site(&self, st: &ChainState, e: &[f64], i: usize, xb_i: f64) -> (f64, f64) {
        let f = &st.factors;
        let fi = f.cond_var(i);
        let wi = st.w[i];
        let mut prec = 1.0 / fi + st.reverse_precision[i];
        let mut num = (wi - e[i]) / fi;
        if self.is_observed[i] {
            prec += 1.0 / st.tau2;
            num += (self.y[i] - xb_i) / st.tau2;
        }
        let flat = f.flat_weights();
        let rev = &st.reverse;
        for k in rev.range(i) {
            let l = rev.target[k] as usize;
            let b = flat[rev.slot[k] as usize];
            // w_l minus the other neighbors' contributions
            num += b * (e[l] + b * wi) / f.cond_var(l);
        }
        let v = 1.0 / prec;
        (v * num, v)
    }

    /// Mean and variance of `w_i | rest` for the current state.
    pub fn w_conditional(&self, st: &ChainState, i: usize) -> (f64, f64) {
        let e = Self::residuals(st);
        let xb_i = if self.is_observed[i] { self.xb(i, &st.beta) } else { 0.0 };
        self.w_site(st, &e, i, xb_i)
    }

    /// One sequential sweep over the random effect in enumeration order.
    pub fn update_w(&self, st: &mut ChainState) -> Result<()> {
        if !self.spec.is_spatial() {
            return Ok(());
        }
        let mut e = Self::residuals(st);
        for i in 0..st.w.len() {
            let xb_i = if self.is_observed[i] { self.xb(i, &st.beta) } else { 0.0 };
            let (mean, var) = self.w_site(st, &e, i, xb_i);
            let z: f64 = st.rng.sample(StandardNormal);
            let new = mean + var.sqrt() * z;
            let d = new - st.w[i];
            st.w[i] = new;
            e[i] += d;
            let flat = st.factors.flat_weights();
            for k in st.reverse.range(i) {
                e[st.reverse.target[k] as usize] -= flat[st.reverse.slot[k] as usize] * d;
            }
        }
        st.log_w = log_prior_density(&st.w, &st.factors)?;
        Ok(())
    }

    /// Log target of the Metropolis step on the transformed scale:
    /// `log p(w | theta) + log p(theta) + log Jacobian`.
    pub fn theta_log_target(&self, theta: &CovarianceParams, log_w: f64) -> f64 {
        let jac: f64 = self.sampled.iter().map(|(k, t)| t.log_jacobian(values(theta)[*k])).sum();
        log_w + self.spec.priors.theta.log_density(theta) + jac
    }

    /// Log acceptance ratio of moving to `proposal`, along with the proposal's
    /// factors. `None` when the proposal has zero prior density or its
    /// covariance is numerically singular.
    pub fn log_accept_ratio(
        &self,
        st: &ChainState,
        proposal: &CovarianceParams,
    ) -> Result<Option<(f64, SparseFactors)>> {
        if proposal.validate().is_err() || self.spec.priors.theta.log_density(proposal) == f64::NEG_INFINITY {
            return Ok(None);
        }
        let factors = match self.factors_for(proposal) {
            Ok(f) => f,
            Err(Error::NotPositiveDefinite(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let log_w = log_prior_density(&st.w, &factors)?;
        let ratio = self.theta_log_target(proposal, log_w) - self.theta_log_target(&st.theta, st.log_w);
        Ok(Some((ratio, factors)))
    }

    /// Random-walk Metropolis step for the covariance parameters. With
    /// `adapt` the proposal scale and shape are tuned.
    pub fn update_theta(&self, st: &mut ChainState, adapt: bool) -> Result<()> {
        let d = self.sampled.len();
        if d == 0 || !self.spec.is_spatial() {
            return Ok(());
        }
        let cur = values(&st.theta);
        let z: Vec<f64> = self.sampled.iter().map(|(k, t)| t.forward(cur[*k])).collect();
        let z_next = st.proposal.jump(&z, &mut st.rng);
        let mut next = cur;
        for (a, (k, t)) in self.sampled.iter().enumerate() {
            next[*k] = t.inverse(z_next[a]);
        }
        let proposal = CovarianceParams { sigma2: next[0], a: next[1], c: next[2], kappa: next[3], ..st.theta };
        let outcome = self.log_accept_ratio(st, &proposal)?;
        let u: f64 = st.rng.random();
        let (accept, prob) = match outcome {
            Some((ratio, factors)) => {
                let prob = ratio.min(0.0).exp();
                if u.ln() < ratio {
                    st.theta = proposal;
                    st.set_factors(factors);
                    st.log_w = log_prior_density(&st.w, &st.factors)?;
                    (true, prob)
                } else {
                    (false, prob)
                }
            }
            None => (false, 0.0),
        };
        let now = values(&st.theta);
        let z_now = self.sampled.iter().map(|(k, t)| t.forward(now[*k])).collect();
        st.proposal.record(adapt, accept, prob, z_now);
        Ok(())
    }

    /// One full iteration: `beta`, `tau2`, `w`, then `theta`.
    pub fn step(&self, st: &mut ChainState, adapt: bool) -> Result<()> {
        self.update_beta(st)?;
        self.update_tau2(st)?;
        self.update_w(st)?;
        self.update_theta(st, adapt)?;
        st.iteration += 1;
        if st.beta.iter().any(|v| !v.is_finite()) || !st.tau2.is_finite() || st.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "iteration {}: beta = {:?}, tau2 = {}, theta = {:?}",
                st.iteration, st.beta, st.tau2, st.theta
            )));
        }
        Ok(())
    }

    pub(crate) fn run_chain(&self, config: &SamplerConfig, chain: usize) -> Result<(Vec<Draw>, ChainDiagnostics)> {
        let mut st = self.init_chain(config.seed, chain)?;
        let mut draws = Vec::with_capacity(config.kept_per_chain());
        for it in 0..config.n_iter {
            let burning = it < config.n_burn;
            self.step(&mut st, burning)?;
            if !burning && (it - config.n_burn) % config.thin == 0 {
                draws.push(Draw {
                    chain,
                    iter: it,
                    beta: st.beta.clone(),
                    tau2: st.tau2,
                    theta: st.theta,
                    w: if config.store_w { st.w.clone() } else { Vec::new() },
                });
            }
        }
        let diag = st.proposal.diagnostics(chain);
        Ok((draws, diag))
    }
}
