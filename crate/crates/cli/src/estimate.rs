use std::fs;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use vcmi::benchmarks::{ground_truth_mi, BenchmarkTask, GroundTruth, ORACLE_SEED};
use vcmi::estimators::{estimate, vce_run, MIEstimate, Method, PairedDataset};

use crate::config::{thread_pool, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{
    data_rng, estimator_rng, fmt_f64, fmt_opt, median, model_dir, save_models, std_dev, DataSource, ModelManifest,
    MANIFEST_FORMAT,
};

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub estimate: Option<MIEstimate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorReport {
    pub estimator: String,
    pub median: f64,
    pub std: f64,
    pub succeeded: usize,
    pub results: Vec<SeedResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub config_hash: String,
    pub source: DataSource,
    pub truth: Option<GroundTruth>,
    pub estimators: Vec<EstimatorReport>,
    pub config: RunConfig,
}

pub fn data_source(cfg: &RunConfig) -> CliResult<DataSource> {
    match (&cfg.task, &cfg.input) {
        (Some(_), Some(_)) => Err(CliError::Config("give either a task or an input file, not both".into())),
        (Some(name), None) => {
            BenchmarkTask::parse(name)?;
            Ok(DataSource::Task { name: name.clone(), samples: cfg.samples })
        }
        (None, Some(path)) => Ok(DataSource::Input { path: path.clone() }),
        (None, None) => Err(CliError::Config("no task or input file given".into())),
    }
}

/// Oracle truth of a named task, drawn with a fixed seed so it is reproducible.
pub fn task_truth(name: &str) -> CliResult<GroundTruth> {
    let task = BenchmarkTask::parse(name)?;
    Ok(ground_truth_mi(&task, &mut data_rng(ORACLE_SEED))?)
}

fn run_cell(
    method: Method,
    data: &PairedDataset,
    seed: u64,
    cfg: &RunConfig,
    source: &DataSource,
    hash: &str,
) -> CliResult<MIEstimate> {
    let mut rng = estimator_rng(seed);
    let mut est = if method == Method::Vce {
        let run = vce_run(data, &cfg.vce, &mut rng)?;
        if cfg.save_models {
            let (d_x, d_y) = data.dims();
            let manifest = ModelManifest {
                format: MANIFEST_FORMAT.into(),
                seed,
                source: source.clone(),
                d_x,
                d_y,
                estimate: run.estimate.value,
                selected_k: run.selection.k,
                config_hash: hash.into(),
            };
            save_models(&model_dir(&cfg.out, seed), &run, &manifest)?;
        }
        run.estimate
    } else {
        estimate(method, data, &cfg.estimator_config(), &mut rng)?
    };
    est.seed = Some(seed);
    est.config_hash = Some(hash.into());
    Ok(est)
}

const HEADER: &str =
    "task,estimator,seed,estimate,std,truth,truth_sigma,selected_k,val_nll,t_stat_x,t_stat_y,wall_time,error,config_hash";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_csv(report: &EstimateReport, mut out: impl Write) -> CliResult<()> {
    let task = match &report.source {
        DataSource::Task { name, .. } => name.clone(),
        DataSource::Input { path } => path.display().to_string(),
    };
    let (truth, sigma) = report.truth.map_or((String::new(), String::new()), |t| (fmt_f64(t.value), fmt_f64(t.sigma)));
    writeln!(out, "{HEADER}")?;
    for er in &report.estimators {
        for r in &er.results {
            let d = r.estimate.as_ref().map(|e| &e.diagnostics);
            writeln!(
                out,
                "{},{},{},{},,{},{},{},{},{},{},{},{},{}",
                csv_field(&task),
                er.estimator,
                r.seed,
                r.estimate.as_ref().map_or("NaN".into(), |e| fmt_f64(e.value)),
                truth,
                sigma,
                d.and_then(|d| d.selected_k).map(|k| k.to_string()).unwrap_or_default(),
                fmt_opt(d.and_then(|d| d.val_nll)),
                fmt_opt(d.and_then(|d| d.t_stat_x)),
                fmt_opt(d.and_then(|d| d.t_stat_y)),
                d.map(|d| fmt_f64(d.wall_time)).unwrap_or_default(),
                csv_field(r.error.as_deref().unwrap_or("")),
                report.config_hash,
            )?;
        }
        writeln!(
            out,
            "{},{},summary,{},{},{},{},,,,,,,{}",
            csv_field(&task),
            er.estimator,
            fmt_f64(er.median),
            fmt_f64(er.std),
            truth,
            sigma,
            report.config_hash
        )?;
    }
    Ok(())
}

/// Runs every selected estimator on every seed, then writes
/// `<out>/estimate.csv` and `<out>/report.json`. A seed that fails is
/// recorded and skipped; an estimator with no successful seed fails the run.
pub fn cmd_estimate(cfg: &RunConfig) -> CliResult<EstimateReport> {
    let methods = cfg.methods()?;
    let source = data_source(cfg)?;
    if cfg.seeds.is_empty() {
        return Err(CliError::Config("empty seed list".into()));
    }
    let hash = cfg.hash();
    let truth = match &source {
        DataSource::Task { name, .. } => Some(task_truth(name)?),
        DataSource::Input { .. } => None,
    };
    // CSV input is read once and validated before any work starts.
    let fixed = match &source {
        DataSource::Input { .. } => Some(source.load(0)?),
        DataSource::Task { .. } => None,
    };
    fs::create_dir_all(&cfg.out)?;

    let cells: Vec<(usize, u64)> =
        (0..methods.len()).flat_map(|m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    let pool = thread_pool()?;
    let results: Vec<CliResult<MIEstimate>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(m, seed)| {
                let data = match &fixed {
                    Some(d) => d.clone(),
                    None => source.load(seed)?,
                };
                run_cell(methods[m], &data, seed, cfg, &source, &hash)
            })
            .collect()
    });
    // Input and I/O problems are not per-seed estimator failures.
    let mut per_method: Vec<Vec<SeedResult>> = vec![Vec::new(); methods.len()];
    for ((m, seed), res) in cells.into_iter().zip(results) {
        let entry = match res {
            Ok(e) => SeedResult { seed, estimate: Some(e), error: None },
            Err(e @ (CliError::Input(_) | CliError::Io(_) | CliError::Config(_))) => return Err(e),
            Err(e) => {
                log::warn!("{} seed {seed}: {e}", methods[m]);
                SeedResult { seed, estimate: None, error: Some(e.to_string()) }
            }
        };
        per_method[m].push(entry);
    }

    let estimators: Vec<EstimatorReport> = methods
        .iter()
        .zip(per_method)
        .map(|(m, results)| {
            let values: Vec<f64> = results.iter().filter_map(|r| r.estimate.as_ref().map(|e| e.value)).collect();
            EstimatorReport {
                estimator: m.to_string(),
                median: median(&values),
                std: std_dev(&values),
                succeeded: values.len(),
                results,
            }
        })
        .collect();
    let report = EstimateReport { config_hash: hash, source, truth, estimators, config: cfg.clone() };
    let mut csv = Vec::new();
    write_csv(&report, &mut csv)?;
    fs::write(cfg.out.join("estimate.csv"), csv)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(cfg.out.join("report.json"), json)?;
    if let Some(failed) = report.estimators.iter().find(|e| e.succeeded == 0) {
        let first = failed.results.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(CliError::Estimator(format!("{} failed on every seed: {first}", failed.estimator)));
    }
    Ok(report)
}
