use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vcmi_cli::diagnose::DiagnosticsReport;

fn vcmi(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcmi"))
        .args(args)
        .current_dir(dir)
        .env("VCMI_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn estimate_writes_one_row_per_seed_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = vcmi(
        &["estimate", "--task", "gaussian:d=2,rho=0.5", "--estimator", "gaussian-copula", "--samples", "2000", "--out", "o"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = lines(&dir.path().join("o/estimate.csv"));
    assert!(rows[0].starts_with("task,estimator,seed,estimate,"));
    assert_eq!(rows.len(), 1 + 8 + 1);
    assert!(rows[9].contains(",summary,") || rows[9].contains("summary"));
    assert!(dir.path().join("o/report.json").exists());
}

#[test]
fn malformed_csv_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.csv"), "x0,y0\n1.0,2.0\n3.0\n").unwrap();
    let out = vcmi(&["estimate", "--input", "bad.csv", "--estimator", "gaussian-copula", "--out", "o"], dir.path());
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line"), "{stderr}");
}

#[test]
fn configuration_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "samples = 100\nunknown_key = 1\n").unwrap();
    let bad_key = vcmi(&["estimate", "--config", "c.toml", "--task", "gaussian"], dir.path());
    assert_eq!(code(&bad_key), 3);
    let bad_estimator = vcmi(&["estimate", "--task", "gaussian", "--estimator", "nope"], dir.path());
    assert_eq!(code(&bad_estimator), 3);
    let bad_task = vcmi(&["estimate", "--task", "gaussian:d=x", "--estimator", "gaussian-copula"], dir.path());
    assert_eq!(code(&bad_task), 3);
    let bad_flag = vcmi(&["estimate", "--no-such-flag"], dir.path());
    assert_eq!(code(&bad_flag), 3);
}

#[test]
fn sweep_counts_rows_resumes_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "sweep", "--family", "gaussian-rho", "--estimator", "gaussian-copula", "--seeds", "3", "--samples", "1000",
        "--dim-cap", "4", "--out", "s",
    ];
    let first = vcmi(&args, dir.path());
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert!(String::from_utf8_lossy(&first.stdout).contains("15 cells computed"));
    let csv = dir.path().join("s/sweep.csv");
    let rows = lines(&csv);
    assert_eq!(rows.len(), 1 + 5 * 3);

    let before = (fs::read(&csv).unwrap(), fs::read(dir.path().join("s/sweep_summary.csv")).unwrap());
    let again = vcmi(&args, dir.path());
    assert!(String::from_utf8_lossy(&again.stdout).contains("0 cells computed"));
    let after = (fs::read(&csv).unwrap(), fs::read(dir.path().join("s/sweep_summary.csv")).unwrap());
    assert_eq!(before, after);

    // Simulate an interrupted run: drop four rows and tear the last line.
    let mut kept = rows[..rows.len() - 4].join("\n");
    kept.push_str("\ngaussian,2,0.9,gaussian-copula");
    fs::write(&csv, kept).unwrap();
    let resumed = vcmi(&args, dir.path());
    assert_eq!(code(&resumed), 0);
    assert!(String::from_utf8_lossy(&resumed.stdout).contains("4 cells computed"));
    let wall = 10;
    let strip = |rows: Vec<String>| -> Vec<String> {
        rows.iter()
            .map(|r| r.split(',').enumerate().filter(|(i, _)| *i != wall).map(|(_, f)| f).collect::<Vec<_>>().join(","))
            .collect()
    };
    assert_eq!(strip(lines(&csv)), strip(rows));
}

#[test]
fn sweep_rejects_a_file_with_other_columns() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("s")).unwrap();
    fs::write(dir.path().join("s/sweep.csv"), "a,b\n1,2\n").unwrap();
    let out = vcmi(
        &["sweep", "--family", "gaussian-rho", "--estimator", "gaussian-copula", "--seeds", "1", "--dim-cap", "2", "--out", "s"],
        dir.path(),
    );
    assert_eq!(code(&out), 3);
}

fn train_and_diagnose(dir: &Path, task: &str, config: &str, name: &str) -> DiagnosticsReport {
    fs::write(dir.join(format!("{name}.toml")), config).unwrap();
    let out = vcmi(
        &[
            "estimate", "--config", &format!("{name}.toml"), "--task", task, "--seeds", "1", "--samples", "3000",
            "--save-models", "--out", name,
        ],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let models = format!("{name}/models/seed_0");
    let diag = vcmi(&["diagnose", "--models", &models, "--out", &format!("{name}/diag")], dir);
    assert_eq!(code(&diag), 0, "{}", String::from_utf8_lossy(&diag.stderr));
    assert!(dir.join(format!("{name}/diag/rank_correlations.csv")).exists());
    serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}/diag/diagnostics.json"))).unwrap()).unwrap()
}

#[test]
fn diagnose_reports_clean_ranks_for_an_independent_run() {
    let dir = tempfile::tempdir().unwrap();
    let r = train_and_diagnose(dir.path(), "gaussian:d=4,rho=0", "", "fresh");
    assert!(r.x.t_stat < 0.05 && r.y.t_stat < 0.05, "{r:?}");
    assert!(r.x.round_trip < 1e-2 && r.y.round_trip < 1e-2, "{r:?}");
    assert!((r.estimate - r.saved_estimate).abs() < 1e-12);

    // A truncated checkpoint is a checkpoint error.
    let copula = dir.path().join("fresh/models/seed_0/copula.json");
    let text = fs::read_to_string(&copula).unwrap();
    fs::write(&copula, &text[..text.len() / 2]).unwrap();
    let out = vcmi(&["diagnose", "--models", "fresh/models/seed_0"], dir.path());
    assert_eq!(code(&out), 5);
}

#[test]
fn diagnose_flags_an_undertrained_flow() {
    // Without the linear stage the flow alone has to undo the mixing.
    let dir = tempfile::tempdir().unwrap();
    let task = "gaussian:d=4,rho=0,mixing=true";
    let base = "[vce.flow]\nlinear = \"none\"\nnormalization = \"affine\"\n";
    let trained = train_and_diagnose(dir.path(), task, base, "trained");
    let weak = train_and_diagnose(dir.path(), task, &format!("{base}max_epochs = 1\n"), "weak");
    for (t, w) in [(trained.x.t_stat, weak.x.t_stat), (trained.y.t_stat, weak.y.t_stat)] {
        assert!(w > t, "trained {trained:?}\nweak {weak:?}");
    }
}
