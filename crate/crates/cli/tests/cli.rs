use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sme-lab");

const SMALL: &str = r#"
name = "small"
T = 200
n_seeds = 3
base_seed = 7
checkpoints = [25, 50, 100, 200]
w_used = ["exact", "polygon8"]

[system]
kind = "external"
a = [[0.377, -0.788], [-0.533, 0.143]]
b = [[1.067, -0.366], [0.520, -0.480]]

[noise]
support = { kind = "l2ball", r = 1.0 }

[diam]
n_dirs = 8
"#;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("SME_LAB_SEED")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn xi_polygon16() {
    let o = run(&["--log-level", "quiet", "xi", "--support", "polygon16"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "0.98079");
}

#[test]
fn xi_box_three_dims() {
    let o = run(&["--log-level", "quiet", "xi", "--support", "box", "--dim", "3"]);
    assert!(o.status.success());
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!((v - 1.0 / 3f64.sqrt()).abs() < 1e-5);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["xi"]).status.code(), Some(2));
    assert_eq!(run(&["xi", "--support", "hexagon"]).status.code(), Some(2));
}

#[test]
fn zero_horizon_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t0.toml", &SMALL.replace("T = 200", "T = 0"));
    let o = run(&["experiment", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
}

#[test]
fn placeholder_config_exits_2() {
    let cfg = configs().join("boeing747.toml");
    let o = run(&["experiment", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn experiment_is_reproducible_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let oa = run(&["experiment", "--config", &cfg, "--out", a.to_str().unwrap(), "--parallel", "1"]);
    let ob = run(&["experiment", "--config", &cfg, "--out", b.to_str().unwrap(), "--parallel", "3"]);
    assert!(oa.status.success() && ob.status.success());
    let ta = fs::read(&a).unwrap();
    assert_eq!(ta, fs::read(&b).unwrap());
    let text = String::from_utf8(ta).unwrap();
    assert!(text.starts_with("seed,t,estimator,diam_lower,diam_upper,lse_diam,wall_ms\n"));
    // 3 seeds x 4 checkpoints x (2 membership estimators + lse)
    assert_eq!(text.lines().count(), 1 + 3 * 4 * 3);
}

#[test]
fn seed_env_overrides_base_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", &SMALL.replace("n_seeds = 3", "n_seeds = 1"));
    let plain = run(&["experiment", "--config", &cfg]);
    let shifted = Command::new(BIN)
        .args(["experiment", "--config", &cfg])
        .env("SME_LAB_SEED", "99")
        .output()
        .unwrap();
    assert!(plain.status.success() && shifted.status.success());
    let s = stdout(&shifted);
    assert!(s.lines().nth(1).unwrap().starts_with("99,"));
    assert!(stdout(&plain).lines().nth(1).unwrap().starts_with("7,"));

    let bad = Command::new(BIN)
        .args(["experiment", "--config", &cfg])
        .env("SME_LAB_SEED", "minus one")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn seeds_flag_limits_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = run(&["experiment", "--config", &cfg, "--seeds", "1"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1 + 4 * 3);
}

#[test]
fn numeric_failure_exits_3_and_keeps_other_rows() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace(r#""polygon8""#, r#"{ kind = "box", a = [0.2, 0.2] }"#);
    let cfg = write_config(dir.path(), "bad.toml", &text);
    let out = dir.path().join("bad.csv");
    let o = run(&["experiment", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("seed 7 t "), "{err}");
    let csv = fs::read_to_string(out).unwrap();
    assert!(csv.lines().skip(1).all(|l| !l.contains("sme:box")));
    assert_eq!(csv.lines().count(), 1 + 3 * 4 * 2);
}

#[test]
fn summarize_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let csv = dir.path().join("r.csv");
    assert!(run(&["experiment", "--config", &cfg, "--out", csv.to_str().unwrap()]).status.success());
    let o = run(&["summarize", "--in", csv.to_str().unwrap()]);
    assert!(o.status.success());
    let s = stdout(&o);
    let mut lines = s.lines();
    assert_eq!(lines.next(), Some("estimator,t,n_seeds,mean,std,loglog_slope"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * 4);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("3")));

    let missing = dir.path().join("missing.csv");
    assert_eq!(run(&["summarize", "--in", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn bounds_csv_is_non_increasing_in_horizon() {
    let total = |t: &str| -> f64 {
        let o = run(&["bounds", "--format", "csv", "--horizon", t, "--m", "50", "--delta", "0.1"]);
        assert!(o.status.success());
        let s = stdout(&o);
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("m,term1,term2,total,vacuous"));
        lines.next().unwrap().split(',').nth(3).unwrap().parse().unwrap()
    };
    let (a, b) = (total("1000"), total("4000"));
    assert!(b <= a, "{b} > {a}");

    let o = run(&["bounds", "--format", "csv", "--xi", "0.7", "--m", "10,20"]);
    assert!(stdout(&o).starts_with("m,term1,term3,total,vacuous\n"));
    assert_eq!(run(&["bounds", "--p-z", "1.5"]).status.code(), Some(2));
}

#[test]
fn calibrate_writes_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("box.json");
    let o = run(&["calibrate", "--support", "box", "--n-mc", "200000", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["support"], "box");
    let slope = v["slice"]["slope"].as_f64().unwrap();
    assert!((slope - 1.0).abs() < 0.15, "{slope}");
}

#[test]
fn simulate_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = run(&["simulate", "--config", &cfg]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.starts_with("t,x0,x1,u0,u1,w0,w1\n"));
    assert_eq!(s.lines().count(), 1 + 201);
}

#[test]
fn estimate_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = run(&["estimate", "--config", &cfg]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert_eq!(s.lines().count(), 1 + 4 * 3);
    assert!(s.lines().any(|l| l.starts_with("sme:polygon8,200,")));
}
