//! Dataset and posterior files, run configuration, response transforms and
//! holdout selection.
//!
//! Dataset CSV header: `site_id, s1[, s2[, s3]], t, y, <covariates...>`, one row
//! per (site, time) cell. An empty `y` field marks a missing response. An
//! intercept column is added in front of the covariates on load.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covariance::CovarianceForm;
use crate::datagen::SyntheticSpec;
use crate::error::{Error, Result};
use crate::mcmc::{
    BetaPrior, ChainDiagnostics, Draw, ModelSpec, PosteriorSamples, Prior, Priors, SamplerConfig, Tau2Prior,
    ThetaPriors, MAX_M, THETA_NAMES,
};
use crate::neighbors::Scheme;
use crate::predict::PredictiveSummary;
use crate::spacetime::{ReferenceSet, SpaceTimePoint};

/// Transform applied to responses before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseTransform {
    #[default]
    None,
    /// `sqrt(y)`; predictions map back through `max(0, v)^2`.
    Sqrt,
}

impl ResponseTransform {
    pub fn forward(&self, y: f64) -> Result<f64> {
        match self {
            ResponseTransform::None => Ok(y),
            ResponseTransform::Sqrt if y >= 0.0 => Ok(y.sqrt()),
            ResponseTransform::Sqrt => Err(Error::Dataset(format!("square-root transform of negative response {y}"))),
        }
    }

    pub fn inverse(&self, v: f64) -> f64 {
        match self {
            ResponseTransform::None => v,
            ResponseTransform::Sqrt => v.max(0.0).powi(2),
        }
    }
}

/// Which observed cells are withheld from the fit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum HoldoutPolicy {
    #[default]
    None,
    /// A uniformly chosen fraction of the observed cells.
    RandomFraction { fraction: f64 },
    /// A run of `days` consecutive times at every site.
    BlockDays { days: usize },
}

/// Settings of a `simulate`/`fit`/`predict`/`validate` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_scheme")]
    pub scheme: Scheme,
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_form")]
    pub form: CovarianceForm,
    #[serde(default = "d_one")]
    pub alpha: f64,
    #[serde(default = "d_half")]
    pub nu: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "d_sigma2")]
    pub sigma2_prior: Prior,
    #[serde(default = "d_a")]
    pub a_prior: Prior,
    #[serde(default = "d_c")]
    pub c_prior: Prior,
    #[serde(default = "d_kappa")]
    pub kappa_prior: Prior,
    #[serde(default = "d_two")]
    pub tau2_shape: f64,
    #[serde(default = "d_tau2_rate")]
    pub tau2_rate: f64,
    /// Holds `tau2` at this value instead of sampling it.
    #[serde(default)]
    pub tau2_fixed: Option<f64>,
    #[serde(default = "d_beta")]
    pub beta_prior: BetaPrior,
    #[serde(default = "d_n_iter")]
    pub n_iter: usize,
    #[serde(default = "d_n_burn")]
    pub n_burn: usize,
    #[serde(default = "d_n_chains")]
    pub n_chains: usize,
    #[serde(default = "d_one_usize")]
    pub thin: usize,
    #[serde(default = "d_one_u64")]
    pub seed: u64,
    /// Worker threads; does not change results.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "d_true")]
    pub store_w: bool,
    #[serde(default)]
    pub transform: ResponseTransform,
    #[serde(default)]
    pub holdout: HoldoutPolicy,
    /// Exceedance thresholds on the response scale.
    #[serde(default)]
    pub thresholds: Vec<f64>,
    /// Use every k-th stored draw for prediction.
    #[serde(default = "d_one_usize")]
    pub prediction_thin: usize,
    #[serde(default)]
    pub simulation: Option<SyntheticSpec>,
}

fn d_scheme() -> Scheme {
    Scheme::Adaptive
}
fn d_m() -> usize {
    25
}
fn d_form() -> CovarianceForm {
    CovarianceForm::Exponential
}
fn d_one() -> f64 {
    1.0
}
fn d_half() -> f64 {
    0.5
}
fn d_two() -> f64 {
    2.0
}
fn d_tau2_rate() -> f64 {
    0.1
}
fn d_sigma2() -> Prior {
    Prior::InverseGamma { shape: 2.0, rate: 1.0 }
}
fn d_a() -> Prior {
    Prior::Uniform { lo: 1.0, hi: 100.0 }
}
fn d_c() -> Prior {
    Prior::Uniform { lo: 0.0, hi: 50.0 }
}
fn d_kappa() -> Prior {
    Prior::Uniform { lo: 0.0, hi: 1.0 }
}
fn d_beta() -> BetaPrior {
    BetaPrior::Flat
}
fn d_n_iter() -> usize {
    5000
}
fn d_n_burn() -> usize {
    2000
}
fn d_n_chains() -> usize {
    3
}
fn d_one_usize() -> usize {
    1
}
fn d_one_u64() -> u64 {
    1
}
fn d_true() -> bool {
    true
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.m > MAX_M {
            return bad(format!("m = {} exceeds the maximum of {MAX_M}", self.m));
        }
        if self.n_iter == 0 || self.n_burn > self.n_iter {
            return bad(format!("need 0 <= n_burn <= n_iter and n_iter > 0 (got {}, {})", self.n_burn, self.n_iter));
        }
        if self.n_chains == 0 || self.thin == 0 || self.prediction_thin == 0 {
            return bad("n_chains, thin and prediction_thin must be positive".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be positive".into());
        }
        match self.holdout {
            HoldoutPolicy::RandomFraction { fraction } if !(fraction > 0.0 && fraction < 1.0) => {
                return bad(format!("holdout fraction must lie in (0, 1), got {fraction}"));
            }
            HoldoutPolicy::BlockDays { days: 0 } => return bad("holdout block needs at least one day".into()),
            _ => {}
        }
        if self.thresholds.iter().any(|t| !t.is_finite()) {
            return bad("thresholds must be finite".into());
        }
        self.priors().tau2.validate()?;
        if self.m > 0 {
            self.priors().theta.validate()?;
        }
        if let Some(sim) = &self.simulation {
            sim.validate()?;
        }
        Ok(())
    }

    pub fn priors(&self) -> Priors {
        Priors {
            beta: self.beta_prior.clone(),
            tau2: match self.tau2_fixed {
                Some(value) => Tau2Prior::Fixed { value },
                None => Tau2Prior::InverseGamma { shape: self.tau2_shape, rate: self.tau2_rate },
            },
            theta: ThetaPriors {
                sigma2: self.sigma2_prior,
                a: self.a_prior,
                c: self.c_prior,
                kappa: self.kappa_prior,
                form: self.form,
                alpha: self.alpha,
                nu: self.nu,
                delta: self.delta,
            },
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_iter: self.n_iter,
            n_burn: self.n_burn,
            n_chains: self.n_chains,
            seed: self.seed,
            thin: self.thin,
            store_w: self.store_w,
        }
    }

    /// Model over a loaded dataset.
    pub fn model(&self, data: &Dataset) -> Result<ModelSpec> {
        ModelSpec::new(data.reference.clone(), data.x.clone(), data.y.clone(), self.m)?
            .with_scheme(self.scheme)?
            .with_priors(self.priors())
    }

    /// SHA-256 of the canonical JSON form, ignoring `threads`.
    pub fn semantic_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is an object").remove("threads");
        // serde_json maps are ordered by key, so this form is canonical
        sha256_hex(v.to_string().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// One dataset row as read.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub site_id: String,
    pub s: Vec<f64>,
    pub t: f64,
    pub y: Option<f64>,
    pub x: Vec<f64>,
}

impl DatasetRow {
    pub fn point(&self) -> Result<SpaceTimePoint> {
        SpaceTimePoint::new(&self.s, self.t)
    }
}

/// Rows of a dataset file and its covariate names.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTable {
    pub dim: usize,
    pub covariates: Vec<String>,
    pub rows: Vec<DatasetRow>,
}

fn parse_num(field: &str, what: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Dataset(format!("row {line}: {what} = {field:?} is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Dataset(format!("row {line}: {what} is not finite")));
    }
    Ok(v)
}

/// Reads dataset rows without building a grid. Row numbers in errors count
/// the header as row 1.
pub fn read_table<R: Read>(reader: R) -> Result<DatasetTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("site_id") {
        return Err(Error::Dataset("first column must be site_id".into()));
    }
    let dim = header[1..].iter().take_while(|h| h.len() > 1 && h.starts_with('s') && h[1..].parse::<usize>().is_ok()).count();
    for k in 0..dim {
        if header[1 + k] != format!("s{}", k + 1) {
            return Err(Error::Dataset(format!("expected column s{} but found {}", k + 1, header[1 + k])));
        }
    }
    if !(1..=3).contains(&dim) {
        return Err(Error::Dataset("need 1 to 3 coordinate columns s1, s2, s3".into()));
    }
    if header.get(1 + dim).map(String::as_str) != Some("t") || header.get(2 + dim).map(String::as_str) != Some("y") {
        return Err(Error::Dataset("coordinate columns must be followed by t and y".into()));
    }
    let covariates: Vec<String> = header[3 + dim..].to_vec();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Dataset(format!("row {line}: expected {} fields, found {}", header.len(), rec.len())));
        }
        let site_id = rec[0].to_string();
        if site_id.is_empty() {
            return Err(Error::Dataset(format!("row {line}: empty site_id")));
        }
        let s = (0..dim).map(|j| parse_num(&rec[1 + j], &header[1 + j], line)).collect::<Result<Vec<_>>>()?;
        let t = parse_num(&rec[1 + dim], "t", line)?;
        let y = match &rec[2 + dim] {
            "" => None,
            f => Some(parse_num(f, "y", line)?),
        };
        let x = (0..covariates.len())
            .map(|j| parse_num(&rec[3 + dim + j], &covariates[j], line))
            .collect::<Result<Vec<_>>>()?;
        rows.push(DatasetRow { site_id, s, t, y, x });
    }
    Ok(DatasetTable { dim, covariates, rows })
}

pub fn read_table_file(path: &Path) -> Result<DatasetTable> {
    read_table(File::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?)
}

/// Writes rows in the dataset layout. Numbers use the shortest form that
/// reads back exactly.
pub fn write_table<W: Write>(writer: W, table: &DatasetTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["site_id".to_string()];
    header.extend((1..=table.dim).map(|k| format!("s{k}")));
    header.push("t".into());
    header.push("y".into());
    header.extend(table.covariates.iter().cloned());
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![r.site_id.clone()];
        rec.extend(r.s.iter().map(|v| v.to_string()));
        rec.push(r.t.to_string());
        rec.push(r.y.map(|v| v.to_string()).unwrap_or_default());
        rec.extend(r.x.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table_file(path: &Path, table: &DatasetTable) -> Result<()> {
    write_table(BufWriter::new(File::create(path)?), table)
}

/// A dataset arranged on its site-by-time grid.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub reference: ReferenceSet,
    pub site_ids: Vec<String>,
    /// Intercept followed by the file's covariates; NaN in cells absent
    /// from the file.
    pub x: DMatrix<f64>,
    /// Responses after the transform.
    pub y: Vec<Option<f64>>,
    pub covariates: Vec<String>,
    /// Grid cells with no row in the file.
    pub absent: Vec<usize>,
}

impl Dataset {
    pub fn n_obs(&self) -> usize {
        self.y.iter().filter(|v| v.is_some()).count()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Covariate row with the intercept prepended.
    pub fn design_row(x: &[f64]) -> Vec<f64> {
        std::iter::once(1.0).chain(x.iter().copied()).collect()
    }
}

fn sort_ids(ids: &mut [String]) {
    if ids.iter().all(|s| s.parse::<i64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<i64>().unwrap());
    } else {
        ids.sort();
    }
}

/// Arranges rows on the grid of their distinct sites and times.
pub fn build_dataset(table: &DatasetTable, transform: ResponseTransform, allow_missing_cells: bool) -> Result<Dataset> {
    if table.rows.is_empty() {
        return Err(Error::Dataset("no data rows".into()));
    }
    let mut coords: HashMap<&str, &[f64]> = HashMap::new();
    for (k, r) in table.rows.iter().enumerate() {
        match coords.get(r.site_id.as_str()) {
            Some(&s) if s != r.s.as_slice() => {
                return Err(Error::Dataset(format!("row {}: site {} changes coordinates", k + 2, r.site_id)));
            }
            _ => {
                coords.insert(&r.site_id, &r.s);
            }
        }
    }
    let mut site_ids: Vec<String> = coords.keys().map(|s| s.to_string()).collect();
    sort_ids(&mut site_ids);
    let site_index: HashMap<&str, usize> = site_ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let mut times: Vec<f64> = table.rows.iter().map(|r| r.t).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    let locations: Vec<Vec<f64>> = site_ids.iter().map(|s| coords[s.as_str()].to_vec()).collect();
    let reference = ReferenceSet::enumerate(&locations, &times)?;
    let r = reference.len();
    let p = table.covariates.len() + 1;
    let mut x = DMatrix::from_element(r, p, f64::NAN);
    let mut y = vec![None; r];
    let mut seen = vec![false; r];
    for (k, row) in table.rows.iter().enumerate() {
        let site = site_index[row.site_id.as_str()];
        let time = times.binary_search_by(|v| v.partial_cmp(&row.t).unwrap()).expect("time is in the grid");
        let i = reference.index(site, time);
        if seen[i] {
            return Err(Error::Dataset(format!("row {}: duplicate cell (site {}, t = {})", k + 2, row.site_id, row.t)));
        }
        seen[i] = true;
        x[(i, 0)] = 1.0;
        for (j, v) in row.x.iter().enumerate() {
            x[(i, j + 1)] = *v;
        }
        y[i] = row.y.map(|v| transform.forward(v).map_err(|e| Error::Dataset(format!("row {}: {e}", k + 2)))).transpose()?;
    }
    let absent: Vec<usize> = (0..r).filter(|&i| !seen[i]).collect();
    if !absent.is_empty() && !allow_missing_cells {
        let list: Vec<String> = absent
            .iter()
            .take(10)
            .map(|&i| format!("(site {}, t = {})", site_ids[reference.site_of(i)], reference.time(i)))
            .collect();
        return Err(Error::Dataset(format!(
            "{} site/time cells have no row: {}{}; pass --allow-missing-cells to treat them as missing",
            absent.len(),
            list.join(", "),
            if absent.len() > 10 { ", ..." } else { "" }
        )));
    }
    let mut covariates = vec!["intercept".to_string()];
    covariates.extend(table.covariates.iter().cloned());
    Ok(Dataset { reference, site_ids, x, y, covariates, absent })
}

pub fn load_dataset(path: &Path, transform: ResponseTransform, allow_missing_cells: bool) -> Result<Dataset> {
    build_dataset(&read_table_file(path)?, transform, allow_missing_cells)
}

/// Reference indices of the observed cells to withhold.
pub fn select_holdout(data: &Dataset, policy: HoldoutPolicy, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let observed: Vec<usize> = (0..data.y.len()).filter(|&i| data.y[i].is_some()).collect();
    let mut out = match policy {
        HoldoutPolicy::None => Vec::new(),
        HoldoutPolicy::RandomFraction { fraction } => {
            let k = (fraction * observed.len() as f64).round() as usize;
            sample(&mut rng, observed.len(), k).into_iter().map(|j| observed[j]).collect()
        }
        HoldoutPolicy::BlockDays { days } => {
            let reference = &data.reference;
            let nt = reference.n_times();
            if days > nt {
                return Err(Error::Config(format!("holdout block of {days} days exceeds the {nt} times")));
            }
            let mut out = Vec::new();
            for site in 0..reference.n_sites() {
                let start = rng.random_range(0..=nt - days);
                out.extend((start..start + days).map(|k| reference.index(site, k)).filter(|&i| data.y[i].is_some()));
            }
            out
        }
    };
    out.sort_unstable();
    Ok(out)
}

/// Header of the posterior CSV.
pub fn posterior_header(p: usize, r: usize, with_w: bool) -> Vec<String> {
    let mut h = vec!["chain".to_string(), "iter".to_string()];
    h.extend((0..p).map(|k| format!("beta_{k}")));
    h.push("tau2".into());
    h.extend(THETA_NAMES.iter().map(|s| s.to_string()));
    if with_w {
        h.extend((0..r).map(|i| format!("w_{i}")));
    }
    h
}

/// One row per stored draw: `chain, iter, beta_*, tau2, sigma2, a, c, kappa`
/// and `w_*` when the draws carry the random effect.
pub fn write_posterior<W: Write>(writer: W, samples: &PosteriorSamples) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let with_w = samples.has_w();
    w.write_record(posterior_header(samples.p, samples.r, with_w))?;
    for d in &samples.draws {
        let mut rec = vec![d.chain.to_string(), d.iter.to_string()];
        rec.extend(d.beta.iter().map(|v| v.to_string()));
        rec.push(d.tau2.to_string());
        rec.extend([d.theta.sigma2, d.theta.a, d.theta.c, d.theta.kappa].iter().map(|v| v.to_string()));
        if with_w {
            rec.extend(d.w.iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads draws written by [`write_posterior`]; `theta` supplies the fixed
/// shape of the covariance. `r` is the reference size of the model.
pub fn read_posterior<R: Read>(reader: R, theta: &ThetaPriors, r: usize) -> Result<PosteriorSamples> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let p = header.iter().filter(|h| h.starts_with("beta_")).count();
    let n_w = header.iter().filter(|h| h.starts_with("w_")).count();
    if n_w != 0 && n_w != r {
        return Err(Error::Dataset(format!("posterior has {n_w} random-effect columns but the model has {r} points")));
    }
    if header != posterior_header(p, r, n_w > 0) {
        return Err(Error::Dataset("posterior file header does not match the expected layout".into()));
    }
    let mut draws = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let num = |j: usize| parse_num(&rec[j], &header[j], line);
        let int = |j: usize| {
            rec[j].parse::<usize>().map_err(|_| Error::Dataset(format!("row {line}: bad {} field", header[j])))
        };
        let beta = (0..p).map(|j| num(2 + j)).collect::<Result<Vec<_>>>()?;
        let tau2 = num(2 + p)?;
        let tv = [num(3 + p)?, num(4 + p)?, num(5 + p)?, num(6 + p)?];
        let w = (0..n_w).map(|j| num(7 + p + j)).collect::<Result<Vec<_>>>()?;
        draws.push(Draw { chain: int(0)?, iter: int(1)?, beta, tau2, theta: theta.params(&tv)?, w });
    }
    Ok(PosteriorSamples { p, r, draws, diagnostics: Vec::new() })
}

pub fn write_posterior_file(path: &Path, samples: &PosteriorSamples) -> Result<()> {
    write_posterior(BufWriter::new(File::create(path)?), samples)
}

pub fn read_posterior_file(path: &Path, theta: &ThetaPriors, r: usize) -> Result<PosteriorSamples> {
    read_posterior(File::open(path)?, theta, r)
}

/// Per-chain Metropolis rates, stored next to the posterior CSV.
pub fn write_chain_metadata(path: &Path, diagnostics: &[ChainDiagnostics]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(diagnostics)?)?;
    Ok(())
}

pub fn read_chain_metadata(path: &Path) -> Result<Vec<ChainDiagnostics>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Header of the prediction CSV.
pub fn prediction_header(dim: usize, thresholds: &[f64]) -> Vec<String> {
    let mut h = vec!["id".to_string()];
    h.extend((1..=dim).map(|k| format!("s{k}")));
    h.extend(["t", "median", "mean", "q2.5", "q97.5"].iter().map(|s| s.to_string()));
    h.extend(thresholds.iter().map(|t| format!("p_exceed_{t}")));
    h
}

/// `id, s*, t, median, mean, q2.5, q97.5, p_exceed_*`.
pub fn write_predictions<W: Write>(
    writer: W,
    ids: &[String],
    points: &[SpaceTimePoint],
    dim: usize,
    summaries: &[PredictiveSummary],
    thresholds: &[f64],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(prediction_header(dim, thresholds))?;
    for ((id, p), s) in ids.iter().zip(points).zip(summaries) {
        let mut rec = vec![id.clone()];
        rec.extend(p.s[..dim].iter().map(|v| v.to_string()));
        rec.push(p.t.to_string());
        rec.extend([s.median, s.mean, s.q025, s.q975].iter().map(|v| v.to_string()));
        rec.extend(s.exceed.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Provenance of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub data_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub n_draws: usize,
    pub n_holdout: usize,
    /// Output file name to its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(config: &RunConfig, data_bytes: &[u8], threads: usize) -> Self {
        Manifest {
            tool: "dnngp".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config.semantic_hash(),
            data_hash: sha256_hex(data_bytes),
            seed: config.seed,
            threads,
            n_draws: 0,
            n_holdout: 0,
            outputs: BTreeMap::new(),
        }
    }
}

/// Splits target rows into those at a reference point, as
/// `(row, reference index)`, and the rest.
pub fn split_targets(table: &DatasetTable, reference: &ReferenceSet) -> Result<(Vec<(usize, usize)>, Vec<usize>)> {
    let mut on = Vec::new();
    let mut off = Vec::new();
    for (k, row) in table.rows.iter().enumerate() {
        match reference.locate(&row.point()?) {
            Some(i) => on.push((k, i)),
            None => off.push(k),
        }
    }
    Ok((on, off))
}
