use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vcmi::benchmarks::{sample_task, BenchmarkTask};
use vcmi::copula::CopulaModel;
use vcmi::estimators::{PairedDataset, VceRun};

use crate::error::{CliError, CliResult};
use crate::input::load_paired_csv;

/// 17 significant digits, `NaN` for missing numbers.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.16e}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample standard deviation; `NaN` below two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Where a run's data comes from; enough to regenerate it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Task { name: String, samples: usize },
    Input { path: PathBuf },
}

impl DataSource {
    /// Benchmark data depend on the seed; CSV input does not.
    pub fn load(&self, seed: u64) -> CliResult<PairedDataset> {
        match self {
            DataSource::Task { name, samples } => {
                let task = BenchmarkTask::parse(name)?;
                Ok(sample_task(&task, *samples, &mut data_rng(seed))?)
            }
            DataSource::Input { path } => load_paired_csv(path),
        }
    }
}

pub fn data_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for estimator randomness, so results do not depend on
/// whether the data were sampled or read.
pub fn estimator_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub const MANIFEST_FORMAT: &str = "vcmi-models/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format: String,
    pub seed: u64,
    pub source: DataSource,
    pub d_x: usize,
    pub d_y: usize,
    pub estimate: f64,
    pub selected_k: usize,
    pub config_hash: String,
}

pub fn model_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("models").join(format!("seed_{seed}"))
}

/// Writes `flow_x.json`, `flow_y.json`, `copula.json` and `manifest.json`.
pub fn save_models(dir: &Path, run: &VceRun, manifest: &ModelManifest) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("flow_x.json"), run.stage.flows.x.to_json()?)?;
    fs::write(dir.join("flow_y.json"), run.stage.flows.y.to_json()?)?;
    fs::write(dir.join("copula.json"), run.selection.model.to_json()?)?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Checkpoint(format!("cannot read {}: {e}", path.display())))
}

pub struct SavedModels {
    pub manifest: ModelManifest,
    pub flow_x: vcmi::flow::FlowModel,
    pub flow_y: vcmi::flow::FlowModel,
    pub copula: CopulaModel,
}

pub fn load_models(dir: &Path) -> CliResult<SavedModels> {
    let ctx = |name: &str, e: vcmi::Error| CliError::Checkpoint(format!("{}: {e}", dir.join(name).display()));
    let manifest: ModelManifest = serde_json::from_str(&read_checkpoint(&dir.join("manifest.json"))?)
        .map_err(|e| CliError::Checkpoint(format!("{}: {e}", dir.join("manifest.json").display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(CliError::Checkpoint(format!("unsupported manifest format {:?}", manifest.format)));
    }
    let flow_x = vcmi::flow::FlowModel::from_json(&read_checkpoint(&dir.join("flow_x.json"))?)
        .map_err(|e| ctx("flow_x.json", e))?;
    let flow_y = vcmi::flow::FlowModel::from_json(&read_checkpoint(&dir.join("flow_y.json"))?)
        .map_err(|e| ctx("flow_y.json", e))?;
    let copula =
        CopulaModel::from_json(&read_checkpoint(&dir.join("copula.json"))?).map_err(|e| ctx("copula.json", e))?;
    if flow_x.dim() != manifest.d_x || flow_y.dim() != manifest.d_y || copula.dims() != (manifest.d_x, manifest.d_y) {
        return Err(CliError::Checkpoint("model dimensions disagree with the manifest".into()));
    }
    Ok(SavedModels { manifest, flow_x, flow_y, copula })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for v in [1.0 / 3.0, -2.5e-300, 1.7851e3, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(f64::NAN), "NaN");
        assert_eq!(fmt_opt(None), "");
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        assert!((std_dev(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rng_streams_differ() {
        use rand::Rng;
        assert_ne!(data_rng(3).random::<u64>(), estimator_rng(3).random::<u64>());
    }
}
