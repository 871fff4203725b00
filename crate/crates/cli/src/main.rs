//! Command-line front end: `simulate`, `fit`, `predict` and `validate`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use dnngp::datagen::{simulate_dataset, Observations};
use dnngp::io::{
    build_dataset, read_posterior, read_table, select_holdout, split_targets, write_posterior,
    write_predictions, write_table, Dataset, DatasetRow, DatasetTable, Manifest, RunConfig,
};
use dnngp::mcmc::{run_sampler, ModelSpec, PosteriorSamples};
use dnngp::metrics::{ci_coverage, dic, predictive_loss, rmspe};
use dnngp::predict::{predict_new_points, predict_reference_missing, PredictiveSummary};
use dnngp::SpaceTimePoint;

#[derive(Parser)]
#[command(name = "dnngp", version, about = "Dynamic nearest-neighbor Gaussian process models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a gridded dataset and off-grid holdout points.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the model and write posterior draws.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_missing_cells: bool,
    },
    /// Posterior predictive summaries at target points.
    Predict {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `fit`.
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_missing_cells: bool,
    },
    /// Prediction error on held-out values.
    Validate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        holdout: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_missing_cells: bool,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.to_string().trim().to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<dnngp::Error>().map(|d| d.kind()).unwrap_or("runtime");
            report(kind, format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

fn report(kind: &str, message: String) {
    let r = ErrorReport { error: kind, message };
    eprintln!("{}", serde_json::to_string(&r).expect("error report serializes"));
}

fn warn(message: &str) {
    eprintln!("{}", serde_json::json!({ "warning": message }));
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Fit { data, config, out, allow_missing_cells } => fit(&data, &config, &out, allow_missing_cells),
        Command::Predict { data, posterior, targets, out, allow_missing_cells } => {
            predict(&data, &posterior, &targets, &out, allow_missing_cells)
        }
        Command::Validate { data, posterior, holdout, out, allow_missing_cells } => {
            validate(&data, &posterior, &holdout, &out, allow_missing_cells)
        }
    }
}

/// Worker count: `DNNGP_THREADS`, then the config, then 1.
fn setup_threads(config: &RunConfig) -> anyhow::Result<usize> {
    let n = match std::env::var("DNNGP_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| anyhow!("DNNGP_THREADS must be a positive integer"))?,
        Err(_) => config.threads.unwrap_or(1),
    };
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(n)
}

/// Writes through a temporary file in `DNNGP_SCRATCH` (default: next to
/// the target) and moves it into place.
fn write_output(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let name = path.file_name().ok_or_else(|| anyhow!("output path {} has no file name", path.display()))?;
    let dir = match std::env::var_os("DNNGP_SCRATCH") {
        Some(d) => PathBuf::from(d),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    if std::fs::rename(&tmp, path).is_err() {
        std::fs::copy(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
        std::fs::remove_file(&tmp)?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s.into_bytes()
}

fn table_bytes(table: &DatasetTable) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_table(&mut buf, table)?;
    Ok(buf)
}

fn read_table_at(path: &Path) -> anyhow::Result<(DatasetTable, Vec<u8>)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let table = read_table(bytes.as_slice()).with_context(|| format!("reading {}", path.display()))?;
    Ok((table, bytes))
}

fn observation_rows(obs: &Observations, ids: impl Fn(usize) -> String, dim: usize) -> Vec<DatasetRow> {
    (0..obs.points.len())
        .map(|k| DatasetRow {
            site_id: ids(k),
            s: obs.points[k].s[..dim].to_vec(),
            t: obs.points[k].t,
            y: Some(obs.y[k]),
            x: (1..obs.x.ncols()).map(|j| obs.x[(k, j)]).collect(),
        })
        .collect()
}

fn simulate(config_path: &Path, out: &Path) -> anyhow::Result<()> {
    let config = RunConfig::load(config_path)?;
    setup_threads(&config)?;
    let spec = config.simulation.clone().ok_or_else(|| anyhow!("the config has no simulation section"))?;
    let data = simulate_dataset(&spec)?;
    create_dir(out)?;
    let covariates: Vec<String> = (1..spec.beta.len()).map(|j| format!("x{j}")).collect();
    let n_sites = data.reference.n_sites();
    let grid = DatasetTable {
        dim: spec.dim,
        covariates: covariates.clone(),
        rows: observation_rows(&data.grid, |k| (k % n_sites + 1).to_string(), spec.dim),
    };
    let holdout = DatasetTable {
        dim: spec.dim,
        covariates,
        rows: observation_rows(&data.holdout, |k| format!("h{}", k + 1), spec.dim),
    };
    write_output(&out.join("data.csv"), &table_bytes(&grid)?)?;
    write_output(&out.join("holdout.csv"), &table_bytes(&holdout)?)?;
    let truth = serde_json::json!({ "spec": spec, "w": data.grid.w, "holdout_w": data.holdout.w });
    write_output(&out.join("truth.json"), &json(&truth))?;
    Ok(())
}

#[derive(Serialize)]
struct FitSummary {
    #[serde(rename = "pD")]
    p_d: f64,
    #[serde(rename = "DIC")]
    dic: f64,
    #[serde(rename = "G")]
    g: f64,
    #[serde(rename = "P")]
    p: f64,
    #[serde(rename = "D")]
    d: f64,
}

fn fit(data_path: &Path, config_path: &Path, out: &Path, allow_missing_cells: bool) -> anyhow::Result<()> {
    let config = RunConfig::load(config_path)?;
    let threads = setup_threads(&config)?;
    let (table, data_bytes) = read_table_at(data_path)?;
    let mut data = build_dataset(&table, config.transform, allow_missing_cells)?;
    let held = select_holdout(&data, config.holdout, config.seed)?;
    create_dir(out)?;
    let mut manifest = Manifest::new(&config, &data_bytes, threads);
    let mut outputs: Vec<(&str, Vec<u8>)> = Vec::new();
    if !held.is_empty() {
        let mut rows = Vec::with_capacity(held.len());
        for row in &table.rows {
            if let Some(i) = data.reference.locate(&row.point()?) {
                if held.binary_search(&i).is_ok() {
                    rows.push(row.clone());
                }
            }
        }
        let withheld = DatasetTable { dim: table.dim, covariates: table.covariates.clone(), rows };
        outputs.push(("holdout.csv", table_bytes(&withheld)?));
        for &i in &held {
            data.y[i] = None;
        }
    }
    manifest.n_holdout = held.len();
    let spec = config.model(&data)?;
    let samples = run_sampler(&spec, &config.sampler())?;
    if samples.is_empty() {
        warn("no draws were stored (n_burn = n_iter); the posterior file has a header only");
    }
    manifest.n_draws = samples.len();
    let mut buf = Vec::new();
    write_posterior(&mut buf, &samples)?;
    outputs.push(("posterior.csv", buf));
    outputs.push(("posterior_chains.json", json(&samples.diagnostics)));
    if samples.len() >= 2 && (samples.has_w() || !spec.is_spatial()) {
        let (p_d, dic) = dic(&samples, &spec)?;
        let (g, p, d) = predictive_loss(&samples, &spec)?;
        outputs.push(("metrics.json", json(&FitSummary { p_d, dic, g, p, d })));
    } else {
        warn("fit metrics need at least two stored draws with the random effect; metrics.json not written");
    }
    outputs.push(("config.json", config.to_json().into_bytes()));
    for (name, bytes) in &outputs {
        write_output(&out.join(name), bytes)?;
        manifest.outputs.insert(name.to_string(), dnngp::io::sha256_hex(bytes));
    }
    write_output(&out.join("manifest.json"), &json(&manifest))?;
    Ok(())
}

/// Model, stored draws and config of a fit directory.
struct Fitted {
    config: RunConfig,
    data: Dataset,
    samples: PosteriorSamples,
}

fn load_fit(data_path: &Path, fit_dir: &Path, allow_missing_cells: bool) -> anyhow::Result<Fitted> {
    let config = RunConfig::load(&fit_dir.join("config.json")).context("reading the fit configuration")?;
    setup_threads(&config)?;
    let (table, _) = read_table_at(data_path)?;
    let data = build_dataset(&table, config.transform, allow_missing_cells)?;
    let file = std::fs::File::open(fit_dir.join("posterior.csv")).context("opening posterior.csv")?;
    let mut samples = read_posterior(file, &config.priors().theta, data.reference.len())?;
    if samples.p != data.p() {
        bail!("posterior has {} coefficients but the dataset has {} columns", samples.p, data.p());
    }
    samples.draws = samples.draws.into_iter().step_by(config.prediction_thin).collect();
    Ok(Fitted { config, data, samples })
}

/// Response-scale predictive summaries at every target row.
fn predict_rows(fitted: &Fitted, targets: &DatasetTable) -> anyhow::Result<Vec<PredictiveSummary>> {
    let p = fitted.data.p();
    if targets.covariates.len() + 1 != p {
        bail!("targets have {} covariates but the model has {}", targets.covariates.len(), p - 1);
    }
    if targets.dim != fitted.data.reference.dim() {
        bail!("targets have {} coordinates but the data have {}", targets.dim, fitted.data.reference.dim());
    }
    let (on, off) = split_targets(targets, &fitted.data.reference)?;
    let mut data = fitted.data.clone();
    for &(k, i) in &on {
        if data.x[(i, 0)].is_nan() {
            for (j, v) in Dataset::design_row(&targets.rows[k].x).into_iter().enumerate() {
                data.x[(i, j)] = v;
            }
        }
    }
    let spec: ModelSpec = fitted.config.model(&data)?;
    let seed = fitted.config.seed;
    let mut draws: Vec<Vec<f64>> = vec![Vec::new(); targets.rows.len()];
    if !on.is_empty() {
        let idx: Vec<usize> = on.iter().map(|&(_, i)| i).collect();
        let pd = predict_reference_missing(&fitted.samples, &spec, &idx, seed)?;
        for (&(k, _), d) in on.iter().zip(pd.draws) {
            draws[k] = d;
        }
    }
    if !off.is_empty() {
        let points: Vec<SpaceTimePoint> = off.iter().map(|&k| targets.rows[k].point()).collect::<Result<_, _>>()?;
        let x = DMatrix::from_fn(off.len(), p, |a, j| Dataset::design_row(&targets.rows[off[a]].x)[j]);
        let pd = predict_new_points(&fitted.samples, &spec, &points, &x, seed)?;
        for (&k, d) in off.iter().zip(pd.draws) {
            draws[k] = d;
        }
    }
    let pd = dnngp::predict::PredictiveDraws { draws }.map(|v| fitted.config.transform.inverse(v));
    Ok(pd.summaries(&fitted.config.thresholds))
}

fn predict(data: &Path, fit_dir: &Path, targets: &Path, out: &Path, allow_missing_cells: bool) -> anyhow::Result<()> {
    let fitted = load_fit(data, fit_dir, allow_missing_cells)?;
    let (table, _) = read_table_at(targets)?;
    let summaries = predict_rows(&fitted, &table)?;
    let ids: Vec<String> = table.rows.iter().map(|r| r.site_id.clone()).collect();
    let points: Vec<SpaceTimePoint> = table.rows.iter().map(|r| r.point()).collect::<Result<_, _>>()?;
    let mut buf = Vec::new();
    write_predictions(&mut buf, &ids, &points, table.dim, &summaries, &fitted.config.thresholds)?;
    write_output(out, &buf)
}

#[derive(Serialize)]
struct Validation {
    n: usize,
    rmspe: f64,
    coverage95: f64,
    bias: f64,
    r2: f64,
}

fn validate(data: &Path, fit_dir: &Path, holdout: &Path, out: &Path, allow_missing_cells: bool) -> anyhow::Result<()> {
    let fitted = load_fit(data, fit_dir, allow_missing_cells)?;
    let (mut table, _) = read_table_at(holdout)?;
    table.rows.retain(|r| r.y.is_some());
    if table.rows.is_empty() {
        bail!("the holdout file has no observed responses");
    }
    let summaries = predict_rows(&fitted, &table)?;
    let truth: Vec<f64> = table.rows.iter().map(|r| r.y.unwrap()).collect();
    let medians: Vec<f64> = summaries.iter().map(|s| s.median).collect();
    let intervals: Vec<(f64, f64)> = summaries.iter().map(|s| (s.q025, s.q975)).collect();
    let n = truth.len() as f64;
    let mean_truth = truth.iter().sum::<f64>() / n;
    let sse: f64 = medians.iter().zip(&truth).map(|(m, y)| (m - y) * (m - y)).sum();
    let sst: f64 = truth.iter().map(|y| (y - mean_truth) * (y - mean_truth)).sum();
    let v = Validation {
        n: truth.len(),
        rmspe: rmspe(&medians, &truth)?,
        coverage95: ci_coverage(&intervals, &truth)?,
        bias: medians.iter().zip(&truth).map(|(m, y)| m - y).sum::<f64>() / n,
        r2: 1.0 - sse / sst,
    };
    let bytes = json(&v);
    write_output(out, &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}
