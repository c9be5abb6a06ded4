use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "n_noise = 2\nseed = 5\n\n[horizon]\nt0 = 0.0\ntf = 1.2\nsamples = 24\n";

fn ioc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ioc"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.display().to_string()
}

#[test]
fn derivative_checks_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = ioc(&["check-derivatives", "--points", "5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!String::from_utf8_lossy(&out.stdout).is_empty());
}

#[test]
fn solve_ocp_writes_a_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = ioc(
        &["--config", &cfg, "--out", "run", "solve-ocp", "--theta", "0,0,1,0,0"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("run/trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 24 + 2);
    assert!(dir.path().join("run/solve_report.json").exists());
}

#[test]
fn single_level_run_is_reproducible_from_its_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for out_dir in ["a", "b"] {
        let out = ioc(
            &["--config", &cfg, "--out", out_dir, "ioc-single", "--sigma", "0.5,0.5"],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |d: &str| std::fs::read(dir.path().join(d).join("recovered_0.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a/ioc_single.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], 5);
    assert!(json["noise_seed"].is_u64());
    assert!(dir.path().join("a/manifest.toml").exists());
}

#[test]
fn noise_sweep_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = ioc(&["--config", &cfg, "--out", "sweep", "noise-sweep"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in [
        "sweep.csv",
        "heatmap_theta_error.svg",
        "heatmap_rmse.svg",
        "trajectories_max_rmse.csv",
        "manifest.toml",
    ] {
        assert!(dir.path().join("sweep").join(name).exists(), "missing {name}");
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "theta_true = [0.5, 0.5, 0.5, 0.5, 0.5]\n").unwrap();
    let out = ioc(&["--config", &bad.display().to_string(), "solve-ocp"], dir.path());
    assert!(!out.status.success());
    let out = ioc(&["solve-ocp", "--theta", "1,0"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("five"));
}
