use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use extraction_core::config::{MeasureConfig, RunConfig, StartConfig};
use tempfile::TempDir;

fn extract(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_extract")).args(args).output().expect("binary runs")
}

fn small() -> RunConfig {
    let mut cfg = RunConfig::reference();
    cfg.model.economics.horizon = 1.0;
    cfg.grid.price_cap = 50.0;
    cfg.simulation.paths = 200;
    cfg.simulation.time_step = 1e-2;
    cfg.simulation.error_constant = 10.0;
    cfg.simulation.starts = vec![StartConfig {
        time: 0.0,
        price: 30.0,
        reserve: 5.0,
        regime: 0,
    }];
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

fn run_with(cfg: &RunConfig, command: &str, extra: &[&str]) -> (TempDir, Output) {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), cfg);
    let out = tmp.path().join("out");
    let mut args = vec![command, "--config", &config, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let output = extract(&args);
    (tmp, output)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn reference_solve_writes_artifacts() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("ref");
    let o = extract(&["solve", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["value.csv", "convergence.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["residual_below_tolerance"], true);
    assert!(manifest["contraction_value"].as_f64().unwrap() < 1.0);
    assert!(manifest["config_toml"].as_str().unwrap().contains("schema_version = 1"));
}

#[test]
fn bad_time_step_is_a_validation_failure() {
    let mut cfg = small();
    cfg.grid.time_step = 1.5;
    let (_t, o) = run_with(&cfg, "solve", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("step size must lie in (0,1)"), "{}", stderr(&o));
}

#[test]
fn coarse_quadrature_fails_contraction() {
    let mut cfg = small();
    cfg.model.measure = MeasureConfig::DoubleExponential {
        up_probability: 0.5,
        up_rate: 40.0,
        down_rate: 40.0,
        total_mass: 400.0,
    };
    cfg.quadrature.step = 0.5;
    let (_t, o) = run_with(&cfg, "solve", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("|sum c_j - Gamma|/r"), "{}", stderr(&o));
}

#[test]
fn paper_faithful_reference_is_refused() {
    let (_t, o) = run_with(&small(), "solve", &["--mode", "paper-faithful"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("monotonicity check failed"), "{}", stderr(&o));
}

#[test]
fn unknown_key_rejected() {
    let tmp = TempDir::new().unwrap();
    let text = small().to_toml().replace("[grid]", "[grid]\nextra_key = 3");
    let path = tmp.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let o = extract(&["solve", "--config", path.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("extra_key"));
}

#[test]
fn outputs_are_deterministic() {
    let cfg = small();
    let (a, oa) = run_with(&cfg, "simulate", &["--seed", "11"]);
    let (b, ob) = run_with(&cfg, "simulate", &["--seed", "11"]);
    assert_eq!(oa.status.code(), Some(0), "{}", stderr(&oa));
    assert_eq!(ob.status.code(), Some(0));
    for f in ["value.csv", "convergence.csv", "simulate.csv"] {
        let fa = fs::read(a.path().join("out").join(f)).unwrap();
        let fb = fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(fa, fb, "{f} differs");
    }
    let (c, _) = run_with(&cfg, "simulate", &["--seed", "12"]);
    assert_ne!(
        fs::read(a.path().join("out/simulate.csv")).unwrap(),
        fs::read(c.path().join("out/simulate.csv")).unwrap()
    );
}

#[test]
fn path_dump_format() {
    let (t, o) = run_with(&small(), "simulate", &["--dump-paths", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(t.path().join("out/path_0_1.csv")).unwrap();
    assert!(text.starts_with("t,x,y,regime,u,discounted_profit\n"));
    assert_eq!(text.lines().count(), 1 + 101);
}

#[test]
fn policy_row_counts() {
    let cfg = small();
    let (t, o) = run_with(&cfg, "policy", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let model = cfg.market_model().unwrap();
    let grid = cfg.grid(&model).unwrap();
    let policy = fs::read_to_string(t.path().join("out/policy.csv")).unwrap();
    assert!(policy.starts_with("s,x,y,regime,G,u_star\n"));
    assert_eq!(policy.lines().count(), grid.len() + 1);
    let curves = fs::read_to_string(t.path().join("out/switching_curve.csv")).unwrap();
    assert!(curves.starts_with("s,y,regime,x_star\n"));
    assert_eq!(curves.lines().count(), 4 * grid.n_reserve * grid.regimes + 1);
    let slices: std::collections::BTreeSet<&str> = curves.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(slices.into_iter().collect::<Vec<_>>(), vec!["0", "0.4", "0.7", "1"]);
}

#[test]
fn unprofitable_field_never_extracts() {
    let mut cfg = small();
    cfg.grid.price_cap = 10.0;
    cfg.model.mu = vec![5.0, 5.0];
    let (t, o) = run_with(&cfg, "policy", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let policy = fs::read_to_string(t.path().join("out/policy.csv")).unwrap();
    assert!(policy.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn verify_detects_injected_fault() {
    let cfg = small();
    let (_t, ok) = run_with(&cfg, "verify", &[]);
    assert_eq!(ok.status.code(), Some(0), "{}{}", String::from_utf8_lossy(&ok.stdout), stderr(&ok));
    let (_t, bad) = run_with(&cfg, "verify", &["--inject-fault", "bang-bang"]);
    assert_eq!(bad.status.code(), Some(2));
    let table = String::from_utf8_lossy(&bad.stdout);
    let line = table.lines().find(|l| l.starts_with("bang-bang")).unwrap();
    assert!(line.contains("FAIL"), "{line}");
}
