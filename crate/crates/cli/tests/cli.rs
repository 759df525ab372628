use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bsdelab::noise::PathEnsemble;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bsdelab"));
    c.env_remove("BSDELAB_THREADS");
    c
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const OHLM1: &[&str] = &["solve", "--model", "ohlm1", "--terminal", "one", "--grid", "16,1.0", "--paths", "10000", "--seed", "7"];

#[test]
fn solve_decaying_linear_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(OHLM1, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(dir.path());
    assert_eq!(r["schema_version"], "1.0.0");
    assert_eq!(r["command"], "solve");
    assert_eq!(r["provenance"]["seed"], 7);
    assert_eq!(r["provenance"]["config_hash"].as_str().unwrap().len(), 64);
    let y0 = r["result"]["y0"][0].as_f64().unwrap();
    // implicit Euler on 16 steps: (1 + 1/16)^{-16}, within O(Δt) of e^{-1}
    let discrete = (1.0f64 + 1.0 / 16.0).powi(-16);
    assert!((y0 - discrete).abs() < 1e-10, "{y0}");
    assert!((y0 - (-1.0f64).exp()).abs() < 1.0 / 16.0, "{y0}");
    let csv = fs::read_to_string(dir.path().join("means.csv")).unwrap();
    assert!(csv.starts_with("t,y1,z1_1,m1\n"));
    assert_eq!(csv.lines().count(), 18);
    let meta: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
    assert!(meta["elapsed_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn reports_are_byte_identical_across_threads() {
    let args = ["solve", "--model", "sin:0.3", "--terminal", "w", "--atoms", "1.0", "--grid", "8,1.0", "--paths", "4000", "--seed", "11"];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = bin().args(args).arg("--out").arg(a.path()).arg("--threads").arg("1").output().unwrap();
    let ob = bin().args(args).arg("--out").arg(b.path()).env("BSDELAB_THREADS", "3").output().unwrap();
    assert!(oa.status.success() && ob.status.success(), "{}{}", stderr(&oa), stderr(&ob));
    for f in ["report.json", "means.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn oracle_constant_terminal() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["oracle", "--steps", "4", "--model", "zero", "--terminal", "const:3"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(dir.path());
    assert_eq!(r["result"]["y0"][0].as_f64().unwrap(), 3.0);
    assert!(r["result"]["identity_checks"]["identity"].as_f64().unwrap() <= 1e-12);
}

#[test]
fn horizon_rejects_small_rho() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["horizon", "--model", "ohlm1", "--terminal", "one", "--atoms", "1", "--rho", "-1.5"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("(H5′)"), "{}", stderr(&o));
    assert!(!dir.path().join("report.json").exists());
    let o = run(&["horizon", "--model", "ohlm1", "--terminal", "one"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rho"));
}

#[test]
fn horizon_first_jump_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["horizon", "--model", "ohlm1", "--terminal", "one", "--atoms", "1", "--rho", "0", "--tau", "first-jump:1,2",
          "--n-max", "2", "--paths", "2000", "--seed", "3"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(dir.path());
    assert_eq!(r["result"]["report"]["levels"].as_array().unwrap().len(), 2);
    assert_eq!(r["result"]["nu"].as_f64().unwrap(), -1.0);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "model = \"zero\"\nterminal = \"const:2\"\nsteps = 3\nseed = 5\n").unwrap();
    let out = dir.path().join("o");
    let o = bin().args(["oracle", "--config"]).arg(&cfg).args(["--terminal", "const:4", "--out"]).arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(&out);
    assert_eq!(r["config"]["terminal"], "const:4");
    assert_eq!(r["config"]["seed"], 5);
    assert_eq!(r["result"]["y0"][0].as_f64().unwrap(), 4.0);

    fs::write(&cfg, "modle = \"zero\"\n").unwrap();
    let o = bin().args(["oracle", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("modle"), "{}", stderr(&o));
}

#[test]
fn validation_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[(&[&str], &str)] = &[
        (&["solve", "--atoms", "1,-1"], "atoms"),
        (&["solve", "--p", "1"], "p:"),
        (&["solve", "--model", "nope"], "model"),
        (&["solve", "--grid", "0,1"], "grid"),
        (&["oracle", "--model", "expr:0.3*z", "--alpha", "0", "--lip-k", "0.1", "--steps", "2"], "(H3)"),
        (&["oracle", "--model", "expr:y", "--alpha", "0.2", "--lip-k", "0", "--steps", "2"], "(H1)"),
        (&["suite", "--thread-counts", "0"], "thread_counts"),
        (&["compare", "--model", "zero", "--terminal", "one"], "model2"),
    ];
    for (args, needle) in cases {
        let o = run(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn tree_node_budget_is_a_resource_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["oracle", "--steps", "30", "--k", "2", "--atoms", "1,1"], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn simulate_writes_a_readable_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--grid", "5,0.5", "--k", "2", "--atoms", "0.5,2", "--paths", "300", "--seed", "9"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let e = PathEnsemble::read_from(fs::File::open(dir.path().join("ensemble.bjl")).unwrap()).unwrap();
    assert_eq!((e.n_paths, e.n_steps(), e.k, e.n_atoms, e.seed), (300, 5, 2, 2, 9));
    let r = report(dir.path());
    assert_eq!(r["result"]["step_moments"].as_array().unwrap().len(), 5);
}

#[test]
fn linear_doleans_matches_exponential() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["linear", "--alpha", "-1", "--terminal", "one", "--grid", "64,1.0", "--paths", "2000", "--construction", "exact"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let y0 = report(dir.path())["result"]["solution"]["y0"].as_f64().unwrap();
    assert!((y0 - (-1.0f64).exp()).abs() < 1e-12, "{y0}");
}

#[test]
fn analyze_on_tree_meets_linf_bound() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["analyze", "--tree", "--model", "sup-psi", "--terminal", "count", "--atoms", "1", "--grid", "4,0.4", "--p", "1.5"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(dir.path());
    assert_eq!(r["result"]["linf"]["violations"], 0);
    assert!(r["result"]["apriori"]["ratio"].as_f64().unwrap().is_finite());
    assert!(r["result"]["zero_set"].is_object());
}

#[test]
fn compare_on_tree_compliant_pair() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["compare", "--tree", "--model", "zero", "--terminal", "const:1", "--model2", "zero", "--terminal2", "const:2",
          "--atoms", "1", "--steps", "3"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(dir.path());
    assert_eq!(r["result"]["violations"], 0);
    assert_eq!(r["result"]["hypotheses_hold"], true);
}

#[test]
fn calculus_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["calculus", "--p", "1.5", "--lip-k", "0.5"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(dir.path());
    assert_eq!(r["result"]["checks"]["pass"], true);
    assert!(r["result"]["constants"].is_object());
}
