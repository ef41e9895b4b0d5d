use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::mpsc;

use rayon::prelude::*;
use vcmi::benchmarks::{ground_truth_mi, sweep_grid, sample_task, BenchmarkTask, GroundTruth, TaskSpec, ORACLE_SEED};
use vcmi::estimators::{estimate, Method};

use crate::config::{thread_pool, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{data_rng, estimator_rng, fmt_f64, fmt_opt, median, std_dev};

pub const BASE_COLUMNS: [&str; 13] = [
    "family",
    "d",
    "rho",
    "estimator",
    "seed",
    "estimate",
    "truth",
    "truth_sigma",
    "selected_k",
    "val_nll",
    "wall_time",
    "error",
    "config_hash",
];

pub fn header(cfg: &RunConfig) -> Vec<String> {
    let mut cols: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    if cfg.k_ablation {
        for k in cfg.vce.copula.ladder.values() {
            cols.push(format!("k{k}_val_nll"));
            cols.push(format!("k{k}_estimate"));
        }
    }
    cols
}

/// `(family, d, rho, estimator, seed, config_hash)`; rho kept as written.
type CellKey = (String, String, String, String, String, String);

fn key_of(row: &[String]) -> CellKey {
    (row[0].clone(), row[1].clone(), row[2].clone(), row[3].clone(), row[4].clone(), row[12].clone())
}

fn sort_key(row: &[String]) -> (String, usize, f64, String, u64, String) {
    (
        row[0].clone(),
        row[1].parse().unwrap_or(usize::MAX),
        row[2].parse().unwrap_or(f64::NAN),
        row[3].clone(),
        row[4].parse().unwrap_or(u64::MAX),
        row[12].clone(),
    )
}

fn read_rows(path: &Path, header: &[String]) -> CliResult<Vec<Vec<String>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let found: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    if found != header {
        return Err(CliError::Config(format!(
            "{} was written with different columns; choose another output directory",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        match rec {
            Ok(r) if r.len() == header.len() => rows.push(r.iter().map(String::from).collect()),
            // A torn final line from an interrupted run is dropped and recomputed.
            Ok(_) | Err(_) => log::warn!("ignoring a malformed row in {}", path.display()),
        }
    }
    Ok(rows)
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(|e| CliError::Io(e.into()))?;
        w.write_record(header).map_err(|e| CliError::Io(e.into()))?;
        for r in rows {
            w.write_record(r).map_err(|e| CliError::Io(e.into()))?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

struct Cell {
    spec: TaskSpec,
    method: Method,
    seed: u64,
}

fn run_cell(cell: &Cell, truth: &GroundTruth, cfg: &RunConfig, hash: &str) -> Vec<String> {
    let mut row = vec![
        cell.spec.family.name().to_string(),
        cell.spec.d.to_string(),
        cell.spec.rho.to_string(),
        cell.method.to_string(),
        cell.seed.to_string(),
    ];
    let ladder = cfg.vce.copula.ladder.values();
    let mut est_cfg = cfg.estimator_config();
    if cfg.k_ablation {
        est_cfg.vce.copula.exhaustive = true;
    }
    let result = BenchmarkTask::from_spec(&cell.spec)
        .and_then(|task| sample_task(&task, cfg.samples, &mut data_rng(cell.seed)))
        .and_then(|data| estimate(cell.method, &data, &est_cfg, &mut estimator_rng(cell.seed)));
    let (value, k, nll, wall, error, cands) = match result {
        Ok(e) => (
            e.value,
            e.diagnostics.selected_k.map(|k| k.to_string()).unwrap_or_default(),
            fmt_opt(e.diagnostics.val_nll),
            fmt_f64(e.diagnostics.wall_time),
            String::new(),
            e.diagnostics.candidates,
        ),
        Err(e) => (f64::NAN, String::new(), String::new(), String::new(), e.to_string(), Vec::new()),
    };
    row.extend([fmt_f64(value), fmt_f64(truth.value), fmt_f64(truth.sigma), k, nll, wall, error, hash.to_string()]);
    if cfg.k_ablation {
        for k in ladder {
            let c = cands.iter().find(|c| c.k == k);
            row.push(fmt_opt(c.and_then(|c| c.val_nll)));
            row.push(fmt_opt(c.and_then(|c| c.estimate)));
        }
    }
    row
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub computed: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Runs `family × estimators × seeds`, appending each finished cell to
/// `<out>/sweep.csv` through one writer. Cells already present with the
/// same config hash are skipped. At the end the file is rewritten in cell
/// order and `<out>/sweep_summary.csv` is regenerated, so rerunning a
/// finished sweep leaves both files byte-identical.
pub fn cmd_sweep(cfg: &RunConfig) -> CliResult<SweepOutcome> {
    let family = cfg.family.as_deref().ok_or_else(|| CliError::Config("no sweep family given".into()))?;
    let specs = sweep_grid(family, cfg.dim_cap)?;
    let methods = cfg.methods()?;
    if cfg.seeds.is_empty() {
        return Err(CliError::Config("empty seed list".into()));
    }
    let hash = cfg.hash();
    let header = header(cfg);
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("sweep.csv");
    let mut rows = if path.exists() { read_rows(&path, &header)? } else { Vec::new() };
    let done: HashSet<CellKey> = rows.iter().map(|r| key_of(r)).collect();

    let mut pending = Vec::new();
    let mut skipped = 0;
    for spec in &specs {
        for &method in &methods {
            for &seed in &cfg.seeds {
                let key = (
                    spec.family.name().to_string(),
                    spec.d.to_string(),
                    spec.rho.to_string(),
                    method.to_string(),
                    seed.to_string(),
                    hash.clone(),
                );
                if done.contains(&key) {
                    skipped += 1;
                } else {
                    pending.push(Cell { spec: spec.clone(), method, seed });
                }
            }
        }
    }

    let mut truths: BTreeMap<String, GroundTruth> = BTreeMap::new();
    for cell in &pending {
        let name = cell.spec.name();
        if !truths.contains_key(&name) {
            let task = BenchmarkTask::from_spec(&cell.spec)?;
            truths.insert(name, ground_truth_mi(&task, &mut data_rng(ORACLE_SEED))?);
        }
    }

    // Rewrite what we have so appends land after a complete header.
    write_rows(&path, &header, &rows)?;
    let (tx, rx) = mpsc::channel::<Vec<String>>();
    let writer_path = path.clone();
    let writer = std::thread::spawn(move || -> CliResult<Vec<Vec<String>>> {
        let file = OpenOptions::new().append(true).open(&writer_path)?;
        let mut w = csv::Writer::from_writer(file);
        let mut fresh = Vec::new();
        for row in rx {
            w.write_record(&row).map_err(|e| CliError::Io(e.into()))?;
            w.flush()?;
            fresh.push(row);
        }
        Ok(fresh)
    });
    let pool = thread_pool()?;
    pool.install(|| {
        pending.par_iter().for_each_with(tx, |tx, cell| {
            let row = run_cell(cell, &truths[&cell.spec.name()], cfg, &hash);
            tx.send(row).expect("writer alive");
        })
    });
    let fresh = writer.join().expect("writer thread")?;
    let failed = fresh.iter().filter(|r| !r[11].is_empty()).count();
    let computed = fresh.len();
    rows.extend(fresh);
    rows.sort_by(|a, b| {
        let (ka, kb) = (sort_key(a), sort_key(b));
        ka.0.cmp(&kb.0)
            .then(ka.1.cmp(&kb.1))
            .then(ka.2.total_cmp(&kb.2))
            .then(ka.3.cmp(&kb.3))
            .then(ka.4.cmp(&kb.4))
            .then(ka.5.cmp(&kb.5))
    });
    write_rows(&path, &header, &rows)?;
    write_summary(&cfg.out.join("sweep_summary.csv"), &rows, &hash)?;
    Ok(SweepOutcome { computed, skipped, failed })
}

fn write_summary(path: &Path, rows: &[Vec<String>], hash: &str) -> CliResult<()> {
    // Rows arrive sorted, so groups are contiguous and in order.
    let mut out = Vec::new();
    writeln!(out, "family,d,rho,estimator,median,std,truth,truth_sigma,succeeded,failed,config_hash")?;
    let current: Vec<&Vec<String>> = rows.iter().filter(|r| r[12] == hash).collect();
    for group in current.chunk_by(|a, b| a[..4] == b[..4]) {
        let values: Vec<f64> = group.iter().filter(|r| r[11].is_empty()).filter_map(|r| r[5].parse().ok()).collect();
        let r = group[0];
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r[0],
            r[1],
            r[2],
            r[3],
            fmt_f64(median(&values)),
            fmt_f64(std_dev(&values)),
            r[6],
            r[7],
            values.len(),
            group.len() - values.len(),
            hash
        )?;
    }
    fs::write(path, out)?;
    Ok(())
}
