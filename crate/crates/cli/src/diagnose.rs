use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, ArrayView2};
use serde::{Deserialize, Serialize};
use vcmi::flow::FlowModel;
use vcmi::ranks::{empirical_rank, rank_diagnostics, RankDiagnostics, RankSource, RankedPair};

use crate::error::CliResult;
use crate::output::{fmt_f64, load_models};

/// Rows used for the round-trip check.
pub const PROBE_ROWS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    pub t_stat: f64,
    pub q05: f64,
    pub q95: f64,
    /// Max-norm `decode(encode(x)) − x` over the probe rows.
    pub round_trip: f64,
    pub flow_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub seed: u64,
    pub x: BlockDiagnostics,
    pub y: BlockDiagnostics,
    pub copula_k: usize,
    pub copula_train_nll: f64,
    pub copula_val_nll: Option<f64>,
    /// Mean log copula density of the regenerated ranks.
    pub estimate: f64,
    pub saved_estimate: f64,
}

fn block(flow: &FlowModel, data: ArrayView2<f64>) -> CliResult<(vcmi::ranks::RankMatrix, BlockDiagnostics, RankDiagnostics)> {
    let latents = flow.encode(data)?;
    let source = if flow.rank_only { RankSource::RawData } else { RankSource::FromFlow };
    let ranks = empirical_rank(latents.view(), source)?;
    let diag = rank_diagnostics(&ranks)?;
    let probe = data.slice(s![..PROBE_ROWS.min(data.nrows()), ..]);
    let round_trip = if flow.rank_only {
        0.0
    } else {
        let back = flow.decode(flow.encode(probe)?.view())?;
        (&back - &probe).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    let bd = BlockDiagnostics {
        t_stat: diag.t_stat,
        q05: diag.q05,
        q95: diag.q95,
        round_trip,
        flow_epochs: flow.summary.as_ref().map(|s| s.epochs),
    };
    Ok((ranks, bd, diag))
}

/// Loads the models in `models`, regenerates their data from the manifest
/// and writes `diagnostics.json` plus `rank_correlations.csv` (one row per
/// off-diagonal score correlation, for histograms) into `out`.
pub fn cmd_diagnose(models: &Path, out: &Path) -> CliResult<DiagnosticsReport> {
    let saved = load_models(models)?;
    let data = saved.manifest.source.load(saved.manifest.seed)?;
    if data.dims() != (saved.manifest.d_x, saved.manifest.d_y) {
        return Err(crate::CliError::Input("data dimensions disagree with the saved models".into()));
    }
    let (rx, bx, dx) = block(&saved.flow_x, data.x())?;
    let (ry, by, dy) = block(&saved.flow_y, data.y())?;
    let pair = RankedPair::new(rx, ry)?;
    let z = pair.joined_scores();
    let estimate = saved.copula.log_density_scores(z.view())?.mean().expect("non-empty");
    let report = DiagnosticsReport {
        seed: saved.manifest.seed,
        x: bx,
        y: by,
        copula_k: saved.copula.k(),
        copula_train_nll: saved.copula.meta.train_nll,
        copula_val_nll: saved.copula.meta.val_nll,
        estimate,
        saved_estimate: saved.manifest.estimate,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("diagnostics.json"), serde_json::to_string_pretty(&report).expect("serializes"))?;
    let mut csv = Vec::new();
    writeln!(csv, "block,correlation")?;
    for (name, d) in [("x", &dx), ("y", &dy)] {
        for c in &d.off_diagonal {
            writeln!(csv, "{name},{}", fmt_f64(*c))?;
        }
    }
    fs::write(out.join("rank_correlations.csv"), csv)?;
    Ok(report)
}
