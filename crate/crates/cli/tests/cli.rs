//! End-to-end runs of the `rvbatch` binary and the experiment runner.

use std::path::Path;
use std::process::Command;

use rvbatch_cli::{run_experiment, ConfigFile, ExperimentConfig};
use rvbatch_core::Method;

fn rvbatch(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_rvbatch"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn resolve(text: &str) -> ExperimentConfig {
    ExperimentConfig::resolve(&ConfigFile::from_toml(text).unwrap()).unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let (code, err) = rvbatch(&[
        "run", "--preset", "test1a", "--n", "500", "--t-end", "1", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    for f in [
        "manifest.json",
        "series_rbm.csv",
        "series_rvrbm.csv",
        "density_rbm_t1.csv",
        "density_rvrbm_t1.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let series = read(&out.join("series_rbm.csv"));
    let mut lines = series.lines();
    assert_eq!(lines.next(), Some("t,mean,variance,error,lambda_mean,clamp_count"));
    assert!(lines.next().unwrap().ends_with(",,"));
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["config"]["preset"], "test1a");
    assert_eq!(manifest["config"]["sim"]["n"], 500);
    assert_eq!(manifest["seeds"][0], 0);
    assert!(manifest["version"].is_string());
}

#[test]
fn manifest_regenerates_identical_series() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let (code, err) = rvbatch(&[
        "run", "--preset", "test2", "--n", "300", "--t-end", "0.5", "--seed", "9", "--out", a.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let manifest = a.join("manifest.json");
    let (code, err) = rvbatch(&["run", "--config", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    for m in ["full", "rbm", "rvrbm"] {
        let f = format!("series_{m}.csv");
        assert_eq!(read(&a.join(&f)), read(&b.join(&f)), "{f}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.toml");
    std::fs::write(&empty, "").unwrap();
    let (code, err) = rvbatch(&["run", "--config", empty.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("no preset and no model specified"), "{err}");

    let (code, err) = rvbatch(&["run", "--preset", "test1a", "--n", "20", "--m", "20"]);
    assert_eq!(code, 1);
    assert!(err.contains("m = 20") && err.contains("n = 20"), "{err}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "preset = \"test1a\"\n[sim]\nparticles = 5\n").unwrap();
    let (code, err) = rvbatch(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("particles"), "{err}");

    let (code, _) = rvbatch(&["run", "--preset", "test1a", "--n", "many"]);
    assert_eq!(code, 1);

    let (code, _) = rvbatch(&["run", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(code, 3);

    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let (code, _) = rvbatch(&[
        "run", "--preset", "test1a", "--n", "50", "--t-end", "0", "--out", blocker.join("sub").to_str().unwrap(),
    ]);
    assert_eq!(code, 3);

    let (code, _) = rvbatch(&["--help"]);
    assert_eq!(code, 0);
}

#[test]
fn config_subcommand_prints_resolved_toml() {
    let out = Command::new(env!("CARGO_BIN_EXE_rvbatch"))
        .args(["config", "--preset", "test3", "--m", "20"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let file = ConfigFile::from_toml(&text).unwrap();
    assert_eq!(file.sim.m, Some(20));
    assert_eq!(file.sim.t_end, Some(10.0));
}

#[test]
fn sweep_summary_has_one_row_per_point_and_method() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = resolve(
        "preset = \"test1a\"\nrepeats = 3\n[sim]\nt_end = 0.2\nsnapshot_times = []\n",
    );
    cfg.sweep = Some("n=200,400".parse().unwrap());
    cfg.out = dir.path().to_path_buf();
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.summary.len(), 4);
    assert_eq!(
        report.summary.iter().map(|r| (r.n, r.method)).collect::<Vec<_>>(),
        vec![(200, Method::Rbm), (200, Method::Rvrbm), (400, Method::Rbm), (400, Method::Rvrbm)]
    );
    for r in &report.summary {
        assert_eq!(r.repeats, 3);
        assert!(r.rms_error >= r.mean_error.abs() - 1e-15);
        assert!(r.ci_low.unwrap() <= r.mean_error && r.mean_error <= r.ci_high.unwrap());
    }
    assert!(report.summary[0].mean_final_lambda.is_none());
    assert!(report.summary[1].mean_final_lambda.is_some());
    let text = read(&dir.path().join("summary.csv"));
    assert_eq!(text.lines().count(), 5);
}

// With t_end = 0 the error is that of the initial sample mean, whose RMS is
// sqrt(1/3)/sqrt(n); a log-log fit over n must have slope -1/2.
#[test]
fn sweep_over_n_without_dynamics_shows_monte_carlo_rate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = resolve(
        "preset = \"test1a\"\nmethods = [\"full\"]\nrepeats = 100\n\
         [sim]\nt_end = 0.0\nerror_reference = \"law\"\nsnapshot_times = []\n",
    );
    cfg.sweep = Some("n=100,1000,10000".parse().unwrap());
    cfg.out = dir.path().to_path_buf();
    let report = run_experiment(&cfg).unwrap();
    let pts: Vec<(f64, f64)> = report
        .summary
        .iter()
        .map(|r| ((r.n as f64).ln(), r.rms_error.ln()))
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope / -0.5 - 1.0).abs() < 0.25, "slope {slope}");
}
