use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vcmi_cli::config::{parse_seeds, RunConfig};
use vcmi_cli::diagnose::cmd_diagnose;
use vcmi_cli::estimate::cmd_estimate;
use vcmi_cli::sweep::cmd_sweep;
use vcmi_cli::{CliError, CliResult};

/// Mutual information estimation with vector copulas.
///
/// Exit codes: 0 success, 1 I/O, 2 input data, 3 configuration,
/// 4 estimator failure on every seed, 5 checkpoint. Set VCMI_WORKERS to
/// bound the worker pool.
#[derive(Parser)]
#[command(name = "vcmi", version, about, long_about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate MI of one task or CSV file for each seed.
    Estimate(EstimateArgs),
    /// Run a benchmark family over estimators and seeds.
    Sweep(SweepArgs),
    /// Inspect saved models: rank statistics, round trips, copula fit.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated estimators: vce, vce-prime, gaussian-copula, mine, infonce, smile, smile-<tau>.
    #[arg(long, value_delimiter = ',')]
    estimator: Vec<String>,
    /// Seed count `n`, range `a..b` or list `a,b,c`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rows sampled per seed for benchmark tasks.
    #[arg(long)]
    samples: Option<usize>,
    /// K ladder: `1,4,8,16,32` or `doubling:<max>`.
    #[arg(long)]
    k_ladder: Option<String>,
    #[arg(long, value_parser = ["constrained", "unconstrained"])]
    copula_mode: Option<String>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    /// Benchmark task, e.g. `gaussian:d=8,rho=0.6`.
    #[arg(long, conflicts_with = "input")]
    task: Option<String>,
    /// CSV with header `x0,..,y0,..`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Save VCE flows and copulas under `<out>/models/seed_<s>/`.
    #[arg(long)]
    save_models: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Family such as gaussian-rho, cube-dim or mog-dim.
    #[arg(long)]
    family: Option<String>,
    /// Upper bound on d_X + d_Y.
    #[arg(long)]
    dim_cap: Option<usize>,
    /// Add validation NLL and estimate columns for every K.
    #[arg(long)]
    k_ablation: bool,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Directory holding flow_x.json, flow_y.json, copula.json, manifest.json.
    #[arg(long)]
    models: PathBuf,
    /// Where to write diagnostics.json and rank_correlations.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn base_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if !common.estimator.is_empty() {
        cfg.estimators = common.estimator.clone();
    }
    if let Some(s) = &common.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(n) = common.samples {
        cfg.samples = n;
    }
    if let Some(l) = &common.k_ladder {
        cfg.set_k_ladder(l)?;
    }
    if let Some(m) = &common.copula_mode {
        cfg.set_copula_mode(m)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Estimate(args) => {
            let mut cfg = base_config(&args.common)?;
            if args.task.is_some() || args.input.is_some() {
                cfg.task = args.task;
                cfg.input = args.input;
            }
            cfg.save_models |= args.save_models;
            let report = cmd_estimate(&cfg)?;
            for e in &report.estimators {
                println!("{}: median {:.4} (std {:.4}, {}/{} seeds)", e.estimator, e.median, e.std, e.succeeded, e.results.len());
            }
            if let Some(t) = report.truth {
                println!("truth: {:.4} (sigma {:.1e})", t.value, t.sigma);
            }
        }
        Command::Sweep(args) => {
            let mut cfg = base_config(&args.common)?;
            if args.family.is_some() {
                cfg.family = args.family;
            }
            if let Some(c) = args.dim_cap {
                cfg.dim_cap = c;
            }
            cfg.k_ablation |= args.k_ablation;
            let o = cmd_sweep(&cfg)?;
            println!("{} cells computed ({} failed), {} already present", o.computed, o.failed, o.skipped);
        }
        Command::Diagnose(args) => {
            let out = args.out.unwrap_or_else(|| args.models.clone());
            let r = cmd_diagnose(&args.models, &out)?;
            println!(
                "t_stat x {:.4} y {:.4}; round trip x {:.2e} y {:.2e}; K {} val NLL {}",
                r.x.t_stat,
                r.y.t_stat,
                r.x.round_trip,
                r.y.round_trip,
                r.copula_k,
                r.copula_val_nll.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { CliError::Config(String::new()).exit_code() } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vcmi: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
