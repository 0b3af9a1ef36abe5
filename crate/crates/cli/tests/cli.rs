use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn shf(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_shf"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn short_config(dir: &Path, days: f64) -> PathBuf {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let text = std::fs::read_to_string(root)
        .unwrap()
        .replace("duration_days = 60.0", &format!("duration_days = {days:.1}"))
        .replace("pcrb_samples = 100", "pcrb_samples = 0");
    let path = dir.join("short.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_configs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = \"x\"\n").unwrap();
    let out = dir.path().join("out");
    let r = shf(&["track", "--config", s(&bad), "--method", "shf", "--out", s(&out)], &[]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bad.toml"));
    let missing = dir.path().join("missing.toml");
    let r = shf(&["simulate", "--config", s(&missing), "--out", s(&out)], &[]);
    assert_eq!(r.status.code(), Some(2));
    let cfg = short_config(dir.path(), 3.0);
    let r = shf(&["simulate", "--config", s(&cfg), "--out", s(&out)], &[("SHF_THREADS", "zero")]);
    assert_eq!(r.status.code(), Some(2));
    let r = shf(&["region", "--config", s(&cfg), "--track-index", "0", "--out", s(&out)], &[]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn unknown_method_is_rejected() {
    let r = shf(&["track", "--config", "x.toml", "--method", "kalman", "--out", "x"], &[]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn missing_run_directory_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let r = shf(&["metrics", "--run-dir", s(&dir.path().join("nothing"))], &[]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn simulate_track_metrics_compare_region() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 20.0);
    let sim = dir.path().join("sim");
    let r = shf(&["simulate", "--config", s(&cfg), "--out", s(&sim)], &[("SHF_THREADS", "1")]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["attributables.csv", "truth_events.csv", "truth_states.csv", "b_jumps.csv"] {
        assert!(sim.join(f).exists(), "{f}");
    }

    let run = dir.path().join("run");
    let r = shf(&["track", "--config", s(&cfg), "--method", "mhe2", "--out", s(&run)], &[]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["method"], "mhe2");
    assert_eq!(summary["detections"]["false"], 0);

    let r = shf(&["metrics", "--run-dir", s(&run)], &[]);
    assert!(r.status.success());
    let metrics: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert!(metrics["rmse_spearman_n1_5"].as_f64().unwrap() < 0.0);
    assert!(run.join("metrics.json").exists());

    let r = shf(&["compare", "--run-dirs", s(&run), s(&run)], &[]);
    assert!(r.status.success());
    assert_eq!(String::from_utf8_lossy(&r.stdout).lines().count(), 3);

    let reg = dir.path().join("region");
    let r = shf(&["region", "--config", s(&cfg), "--track-index", "5", "--grid", "6", "--out", s(&reg)], &[]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(reg.join("region_grid.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("rho_km,rho_rate_km_s,P_km_s"));
    assert_eq!(lines.count(), 36);
}
