use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vcmi::copula::{CopulaMode, KLadder};
use vcmi::critic::CriticConfig;
use vcmi::estimators::{ClassifierConfig, EstimatorConfig, Method, VceConfig};

use crate::error::{CliError, CliResult};

/// Everything a run needs. Every field has a default and unknown keys are
/// rejected, in the TOML file as well as in nested sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Benchmark task name such as `cube:d=8,rho=0.6,mixing=true`.
    pub task: Option<String>,
    /// CSV of paired samples with columns `x0..`, `y0..`.
    pub input: Option<PathBuf>,
    /// Sweep family for `vcmi sweep`.
    pub family: Option<String>,
    pub estimators: Vec<String>,
    pub seeds: Vec<u64>,
    /// Rows sampled per seed from a benchmark task.
    pub samples: usize,
    pub out: PathBuf,
    /// Upper bound on `d_X + d_Y` in sweeps.
    pub dim_cap: usize,
    /// Record validation NLL and estimate for every ladder entry.
    pub k_ablation: bool,
    pub save_models: bool,
    pub vce: VceConfig,
    pub classifier: ClassifierConfig,
    pub critic: CriticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: None,
            input: None,
            family: None,
            estimators: vec!["vce".into()],
            seeds: (0..8).collect(),
            samples: 10_000,
            out: PathBuf::from("vcmi-out"),
            dim_cap: vcmi::benchmarks::DEFAULT_DIM_CAP,
            k_ablation: false,
            save_models: false,
            vce: VceConfig::default(),
            classifier: ClassifierConfig::default(),
            critic: CriticConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn methods(&self) -> CliResult<Vec<Method>> {
        if self.estimators.is_empty() {
            return Err(CliError::Config("no estimator selected".into()));
        }
        self.estimators.iter().map(|s| s.parse::<Method>().map_err(CliError::from)).collect()
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig { vce: self.vce.clone(), classifier: self.classifier.clone(), critic: self.critic.clone() }
    }

    /// SHA-256 over the canonical JSON form, leaving out the output
    /// directory and the seed list (seeds are part of each result's key).
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        canonical.seeds.clear();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn set_copula_mode(&mut self, mode: &str) -> CliResult<()> {
        self.vce.copula.mode = match mode {
            "constrained" => CopulaMode::Constrained,
            "unconstrained" => CopulaMode::Unconstrained,
            other => return Err(CliError::Config(format!("unknown copula mode {other:?}"))),
        };
        Ok(())
    }

    pub fn set_k_ladder(&mut self, text: &str) -> CliResult<()> {
        self.vce.copula.ladder = parse_k_ladder(text)?;
        Ok(())
    }
}

/// `1,4,8,16,32` or `doubling:<max>`.
pub fn parse_k_ladder(text: &str) -> CliResult<KLadder> {
    let bad = || CliError::Config(format!("invalid K ladder {text:?}"));
    if let Some(max) = text.strip_prefix("doubling:") {
        let max: usize = max.trim().parse().map_err(|_| bad())?;
        if max == 0 {
            return Err(bad());
        }
        return Ok(KLadder::Doubling { max });
    }
    let ks = text
        .split(',')
        .map(|k| k.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<CliResult<Vec<_>>>()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(bad());
    }
    Ok(KLadder::List { ks })
}

/// A bare integer `n` means seeds `0..n`; `a..b` is a half-open range;
/// anything with a comma is an explicit list.
pub fn parse_seeds(text: &str) -> CliResult<Vec<u64>> {
    let bad = || CliError::Config(format!("invalid seed list {text:?}"));
    let text = text.trim();
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        (a..b).collect()
    } else if text.contains(',') {
        text.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<CliResult<_>>()?
    } else {
        let n: u64 = text.parse().map_err(|_| bad())?;
        (0..n).collect()
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    let mut dedup = seeds.clone();
    dedup.sort_unstable();
    dedup.dedup();
    if dedup.len() != seeds.len() {
        return Err(CliError::Config(format!("duplicate seeds in {text:?}")));
    }
    Ok(seeds)
}

/// Worker count from `VCMI_WORKERS`, else the available parallelism.
pub fn worker_count() -> CliResult<usize> {
    match std::env::var("VCMI_WORKERS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("VCMI_WORKERS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn thread_pool() -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))
}
