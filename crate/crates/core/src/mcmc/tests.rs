use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::covariance::cross_cov_matrix;
use crate::process::log_prior_density;

fn grid(n: usize, nt: usize) -> ReferenceSet {
    let step = 1.0 / (n - 1) as f64;
    let mut locs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            locs.push(vec![i as f64 * step, j as f64 * step]);
        }
    }
    let times: Vec<f64> = (0..nt).map(|k| k as f64 / (nt - 1) as f64).collect();
    ReferenceSet::enumerate(&locs, &times).unwrap()
}

/// Intercept plus one standard normal covariate; every fourth response missing.
fn fixture(n: usize, nt: usize, m: usize, seed: u64) -> ModelSpec {
    let reference = grid(n, nt);
    let r = reference.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(r, 2, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
    let y: Vec<Option<f64>> = (0..r)
        .map(|i| {
            let v = 1.0 + 2.0 * x[(i, 1)] + rng.sample::<f64, _>(StandardNormal);
            (i % 4 != 3).then_some(v)
        })
        .collect();
    ModelSpec::new(reference, x, y, m).unwrap()
}

fn theta() -> CovarianceParams {
    CovarianceParams::exponential(1.2, 3.0, 2.0, 0.6).unwrap()
}

fn state_with_w(s: &Sampler, seed: u64) -> ChainState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..s.spec().r()).map(|_| 0.7 * rng.sample::<f64, _>(StandardNormal)).collect();
    s.chain_at(vec![0.8, 1.7], 0.4, theta(), w, 1, 0).unwrap()
}

#[test]
fn beta_conditional_matches_generalized_least_squares() {
    let spec = fixture(3, 3, 9, 1);
    let s = Sampler::new(&spec).unwrap();
    let st = state_with_w(&s, 2);
    let (mean, cov) = s.beta_conditional(&st).unwrap();
    let obs = spec.observed();
    let xo = DMatrix::from_fn(obs.len(), 2, |a, b| spec.x[(obs[a], b)]);
    let ro = DVector::from_fn(obs.len(), |a, _| spec.y[obs[a]].unwrap() - st.w[obs[a]]);
    let xtx_inv = (xo.transpose() * &xo).try_inverse().unwrap();
    let want = &xtx_inv * xo.transpose() * ro;
    assert!((mean - want).abs().max() <= 1e-8);
    assert!((cov - xtx_inv * st.tau2).abs().max() <= 1e-8);
}

#[test]
fn beta_intercept_only_is_sample_mean() {
    let reference = ReferenceSet::enumerate(&[vec![0.0], vec![1.0]], &[0.0, 1.0]).unwrap();
    let x = DMatrix::from_element(4, 1, 1.0);
    let y = vec![Some(3.0), Some(3.0), Some(3.0), Some(3.0)];
    let spec = ModelSpec::new(reference, x, y, 0).unwrap();
    let s = Sampler::new(&spec).unwrap();
    let mut st = s.chain_at(vec![0.0], 1.0, theta(), vec![0.0; 4], 1, 0).unwrap();
    let (mean, cov) = s.beta_conditional(&st).unwrap();
    assert!((mean[0] - 3.0).abs() < 1e-12 && (cov[(0, 0)] - 0.25).abs() < 1e-12);
    s.update_beta(&mut st).unwrap();
    assert!(st.beta[0].is_finite());
}

#[test]
fn point_mass_beta_prior_pins_beta() {
    let mut spec = fixture(3, 3, 9, 1);
    spec.priors.beta = BetaPrior::Normal { mean: vec![-2.0, 4.0], cov: vec![1e-14, 0.0, 0.0, 1e-14] };
    let s = Sampler::new(&spec).unwrap();
    let mut st = state_with_w(&s, 2);
    s.update_beta(&mut st).unwrap();
    assert!((st.beta[0] + 2.0).abs() < 1e-5 && (st.beta[1] - 4.0).abs() < 1e-5);
}

#[test]
fn flat_prior_with_collinear_design_is_rejected() {
    let reference = ReferenceSet::enumerate(&[vec![0.0], vec![1.0]], &[0.0, 1.0]).unwrap();
    let x = DMatrix::from_fn(4, 2, |_, _| 1.0);
    let y = vec![Some(1.0); 4];
    let spec = ModelSpec::new(reference, x, y, 0).unwrap();
    let err = Sampler::new(&spec).err().unwrap();
    assert!(err.to_string().contains("ridge"));
}

#[test]
fn tau2_conditional_parameters() {
    let spec = fixture(3, 3, 9, 1);
    let s = Sampler::new(&spec).unwrap();
    let st = state_with_w(&s, 2);
    let (shape, rate) = s.tau2_conditional(&st).unwrap();
    let obs = spec.observed();
    let ss: f64 = obs
        .iter()
        .map(|&i| {
            let e = spec.y[i].unwrap() - spec.x[(i, 0)] * st.beta[0] - spec.x[(i, 1)] * st.beta[1] - st.w[i];
            e * e
        })
        .sum();
    assert!((shape - (2.0 + obs.len() as f64 / 2.0)).abs() < 1e-12);
    assert!((rate - (0.1 + ss / 2.0)).abs() < 1e-12);

    let mut none = spec.clone();
    none.y = vec![None; none.r()];
    none.priors.beta = BetaPrior::Normal { mean: vec![0.0, 0.0], cov: vec![1.0, 0.0, 0.0, 1.0] };
    let s = Sampler::new(&none).unwrap();
    let st = state_with_w(&s, 2);
    assert_eq!(s.tau2_conditional(&st).unwrap(), (2.0, 0.1));
}

#[test]
fn tau2_draws_have_inverse_gamma_mean() {
    // 10 observations with residual sum of squares 12.5: IG(7, 6.35)
    let locs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
    let reference = ReferenceSet::enumerate(&locs, &[0.0, 1.0]).unwrap();
    let x = DMatrix::from_element(10, 1, 1.0);
    let y: Vec<Option<f64>> = (0..10).map(|i| Some(if i % 2 == 0 { 1.25f64.sqrt() } else { -(1.25f64.sqrt()) })).collect();
    let spec = ModelSpec::new(reference, x, y, 0).unwrap();
    let s = Sampler::new(&spec).unwrap();
    let mut st = s.chain_at(vec![0.0], 1.0, theta(), vec![0.0; 10], 3, 0).unwrap();
    let (shape, rate) = s.tau2_conditional(&st).unwrap();
    assert!(shape == 7.0 && (rate - 6.35).abs() < 1e-12);
    let n = 20_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            s.update_tau2(&mut st).unwrap();
            st.tau2
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((mean - 6.35 / 6.0).abs() <= 3.0 * sd / (n as f64).sqrt());
}

#[test]
fn w_conditional_matches_dense_gaussian_conditioning() {
    // m = r - 1 makes the factorization exact
    let mut spec = fixture(3, 3, 26, 4);
    spec.m = 26;
    let s = Sampler::new(&spec).unwrap();
    let st = state_with_w(&s, 5);
    let c = cross_cov_matrix(&spec.reference.points(), &spec.reference.points(), &st.theta).unwrap();
    let q = c.cholesky().unwrap().inverse();
    for i in 0..spec.r() {
        let (mean, var) = s.w_conditional(&st, i);
        let obs = spec.y[i].is_some();
        let mut prec = q[(i, i)];
        let mut num = -(0..spec.r()).filter(|&j| j != i).map(|j| q[(i, j)] * st.w[j]).sum::<f64>();
        if obs {
            prec += 1.0 / st.tau2;
            num += (spec.y[i].unwrap() - spec.x[(i, 0)] * st.beta[0] - spec.x[(i, 1)] * st.beta[1]) / st.tau2;
        }
        assert!((var - 1.0 / prec).abs() <= 1e-8, "i={i}");
        assert!((mean - num / prec).abs() <= 1e-8, "i={i}: {mean} vs {}", num / prec);
    }
}

#[test]
fn isolated_point_conditionals() {
    let reference = ReferenceSet::enumerate(&[vec![0.0]], &[0.0]).unwrap();
    let x = DMatrix::from_element(1, 1, 1.0);
    let mut spec = ModelSpec::new(reference, x, vec![Some(3.0)], 1).unwrap();
    spec.priors.beta = BetaPrior::Normal { mean: vec![0.0], cov: vec![1.0] };
    let th = CovarianceParams::exponential(1.0, 3.0, 2.0, 0.6).unwrap();
    let s = Sampler::new(&spec).unwrap();
    let st = s.chain_at(vec![1.0], 1.0, th, vec![0.0], 1, 0).unwrap();
    let (mean, var) = s.w_conditional(&st, 0);
    assert!((mean - 1.0).abs() < 1e-15 && (var - 0.5).abs() < 1e-15);
    spec.y = vec![None];
    let s = Sampler::new(&spec).unwrap();
    let st = s.chain_at(vec![1.0], 1.0, th, vec![0.0], 1, 0).unwrap();
    assert_eq!(s.w_conditional(&st, 0), (0.0, 1.0));
}

#[test]
fn incremental_sweep_matches_fresh_conditionals() {
    // after a sweep the cached residuals must agree with a recomputation
    let spec = fixture(3, 4, 9, 6);
    let s = Sampler::new(&spec).unwrap();
    let mut st = state_with_w(&s, 7);
    s.update_w(&mut st).unwrap();
    let lw = log_prior_density(&st.w, &st.factors).unwrap();
    let target = s.theta_log_target(&st.theta, lw);
    let (ratio, _) = s.log_accept_ratio(&st, &st.theta.clone()).unwrap().unwrap();
    assert!(ratio.abs() < 1e-10);
    assert!(target.is_finite());
}

#[test]
fn log_accept_ratio_matches_hand_computation() {
    let spec = fixture(3, 3, 9, 8);
    let s = Sampler::new(&spec).unwrap();
    let st = state_with_w(&s, 9);
    let prop = CovarianceParams::exponential(0.9, 5.0, 3.0, 0.4).unwrap();
    let (ratio, _) = s.log_accept_ratio(&st, &prop).unwrap().unwrap();
    let dens = |th: &CovarianceParams| {
        let f = s.factors_for(th).unwrap();
        log_prior_density(&st.w, &f).unwrap()
    };
    // sigma2 ~ IG(2, 1); a ~ U(1, 100); c ~ U(0, 50); kappa ~ U(0, 1)
    let ig = |x: f64| 2.0 * 1f64.ln() - 0.0 - 3.0 * x.ln() - 1.0 / x;
    // log Jacobians: log for sigma2, a, c; logit on [0, 1] for kappa
    let jac = |th: &CovarianceParams| th.sigma2.ln() + th.a.ln() + th.c.ln() + th.kappa.ln() + (1.0 - th.kappa).ln();
    let want = (dens(&prop) + ig(prop.sigma2) + jac(&prop)) - (dens(&st.theta) + ig(st.theta.sigma2) + jac(&st.theta));
    assert!((ratio - want).abs() <= 1e-10, "{ratio} vs {want}");

    let outside = CovarianceParams::exponential(0.9, 500.0, 3.0, 0.4).unwrap();
    assert!(s.log_accept_ratio(&st, &outside).unwrap().is_none());
}

#[test]
fn burn_in_only_run_stores_nothing() {
    let spec = fixture(3, 3, 4, 10);
    let cfg = SamplerConfig { n_iter: 5, n_burn: 5, n_chains: 2, seed: 1, thin: 1, store_w: true };
    let post = run_sampler(&spec, &cfg).unwrap();
    assert!(post.is_empty());
    assert_eq!(post.diagnostics.len(), 2);
}

#[test]
fn runs_are_reproducible() {
    let spec = fixture(3, 3, 4, 11);
    let cfg = SamplerConfig { n_iter: 60, n_burn: 20, n_chains: 2, seed: 17, thin: 2, store_w: true };
    let a = run_sampler(&spec, &cfg).unwrap();
    let b = run_sampler(&spec, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2 * 20);
    let c = run_sampler(&spec, &SamplerConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(a.draws[5].beta, c.draws[5].beta);
    // chains differ from each other
    assert_ne!(a.draws[0].beta, a.draws[20].beta);
}

#[test]
fn simple_scheme_runs() {
    let spec = fixture(3, 4, 4, 12).with_scheme(Scheme::Simple).unwrap();
    let cfg = SamplerConfig { n_iter: 30, n_burn: 10, n_chains: 1, seed: 3, thin: 1, store_w: false };
    let post = run_sampler(&spec, &cfg).unwrap();
    assert_eq!(post.len(), 20);
    assert!(!post.has_w());
    assert!(fixture(3, 4, 5, 12).with_scheme(Scheme::Simple).is_err());
}

#[test]
fn budget_cap_is_enforced() {
    let spec = fixture(5, 5, 4, 1);
    let mut big = spec.clone();
    big.m = MAX_M + 1;
    assert!(matches!(big.validate(), Err(Error::NeighborBudget(_))));
}

#[test]
fn nonspatial_model_matches_conjugate_regression() {
    // flat prior on beta, tau2 ~ IG(a, b): beta | y is multivariate t with
    // mean equal to the least-squares fit
    let reference = grid(5, 4);
    let r = reference.len();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = DMatrix::from_fn(r, 2, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
    let y: Vec<Option<f64>> =
        (0..r).map(|i| Some(0.5 - 1.5 * x[(i, 1)] + 0.6 * rng.sample::<f64, _>(StandardNormal))).collect();
    let spec = ModelSpec::new(reference, x.clone(), y.clone(), 0).unwrap();
    let cfg = SamplerConfig { n_iter: 6000, n_burn: 1000, n_chains: 1, seed: 5, thin: 1, store_w: false };
    let post = run_sampler(&spec, &cfg).unwrap();
    let yv = DVector::from_iterator(r, y.iter().map(|v| v.unwrap()));
    let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
    let bhat = &xtx_inv * x.transpose() * &yv;
    let ss = (&yv - &x * &bhat).norm_squared();
    // marginal posterior: shape a + (n - p)/2, rate b + ss/2; E[tau2] = rate/(shape-1)
    let (shape, rate) = (2.0 + (r as f64 - 2.0) / 2.0, 0.1 + ss / 2.0);
    let e_tau2 = rate / (shape - 1.0);
    for k in 0..2 {
        let draws = post.column(&format!("beta_{k}")).unwrap();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        // Gibbs draws are autocorrelated only through tau2; use a generous
        // effective sample size of a quarter of the draws
        let sd = (e_tau2 * xtx_inv[(k, k)]).sqrt();
        let se = sd / (draws.len() as f64 / 4.0).sqrt();
        assert!((mean - bhat[k]).abs() <= 3.0 * se, "beta_{k}: {mean} vs {}", bhat[k]);
    }
    let t = post.mean("tau2").unwrap();
    assert!((t - e_tau2).abs() / e_tau2 < 0.05);
}

#[test]
fn thread_count_does_not_change_draws() {
    let spec = fixture(4, 4, 9, 13);
    let cfg = SamplerConfig { n_iter: 20, n_burn: 5, n_chains: 2, seed: 2, thin: 1, store_w: true };
    let run = |n| {
        rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(|| run_sampler(&spec, &cfg).unwrap())
    };
    assert_eq!(run(1), run(3));
}
