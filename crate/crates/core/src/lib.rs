//! Dynamic nearest-neighbor Gaussian processes (DNNGP) for Bayesian
//! spatio-temporal regression.
//!
//! A parent space-time Gaussian process with a non-separable Gneiting
//! covariance is approximated by conditioning every point of a reference set
//! on at most `m` earlier "neighbors". The result is a proper Gaussian process
//! whose finite realizations have a sparse precision matrix, so likelihoods,
//! Gibbs sweeps and predictions all cost time linear in the number of points.
//!
//! Module map:
//!
//! - [`spacetime`]: coordinates, the time-major reference enumeration and
//!   history sets.
//! - [`covariance`]: the Gneiting/Matérn and exponential covariance forms.
//! - [`neighbors`]: simple and adaptive (eligible-set based) neighbor sets.
//! - [`process`]: sparse conditional factors, prior density, precision,
//!   prior simulation and the induced covariance.
//! - [`mcmc`]: the hierarchical model and its Gibbs/Metropolis sampler.
//! - [`predict`]: posterior predictive draws at reference and new points.
//! - [`metrics`]: DIC, posterior predictive loss, RMSPE and coverage.
//! - [`datagen`]: synthetic data and dense-GP oracles.
//! - [`dense`]: a full-rank GP model fitted by MCMC, used for comparisons.
//! - [`io`]: dataset files, run configuration and posterior serialization.

pub mod covariance;
pub mod datagen;
pub mod dense;
pub mod error;
pub mod io;
pub mod linalg;
pub mod mcmc;
pub mod metrics;
pub mod neighbors;
pub mod predict;
pub mod process;
pub mod spacetime;

pub use covariance::{CovarianceForm, CovarianceParams};
pub use error::{Error, Result};
pub use mcmc::{ModelSpec, PosteriorSamples, SamplerConfig};
pub use neighbors::{NeighborTable, Scheme};
pub use process::SparseFactors;
pub use spacetime::{ReferenceSet, SpaceTimePoint};
