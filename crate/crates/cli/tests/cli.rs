use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use serde_json::Value;

use qcert_cli::{run, ExitStatus, RunConfig};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn cli(args: &[&str]) -> RunConfig {
    RunConfig::try_parse_from(std::iter::once("qcert").chain(args.iter().copied())).unwrap()
}

fn run_ok(args: &[&str]) -> qcert_cli::RunOutcome {
    let out = run(&cli(args)).unwrap_or_else(|e| panic!("{args:?}: {e}"));
    assert_eq!(out.status, ExitStatus::Ok, "{args:?}: {}", out.summary);
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn sat_characterize_verify_audit() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = fixture("sat.recipe.toml");
    run_ok(&["characterize", "--config", s(&recipe), "--out", s(dir.path())]);
    let cands = dir.path().join("candidates.json");
    run_ok(&["verify", "--config", s(&recipe), "--candidates", s(&cands), "--out", s(dir.path())]);
    let verified = json(&dir.path().join("verified.json"));
    let records = verified["records"].as_array().unwrap();
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| r["verified"] == Value::Bool(true)));
    assert_eq!(verified["seed"], 0);
    let out = run_ok(&["report", "--audit", "--config", s(&recipe), "--out", s(dir.path())]);
    assert!(out.summary.contains("0 failures"));
}

#[test]
fn tanh_verify_with_audit() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["verify", "--audit", "--config", s(&fixture("tanh.recipe.toml")), "--out", s(dir.path())]);
    let verified = json(&dir.path().join("verified.json"));
    let records = verified["records"].as_array().unwrap();
    let count = |p: &str| records.iter().filter(|r| r["provenance"] == p && r["verified"] == true).count();
    assert_eq!(count("candidate"), 8);
    assert_eq!(count("analytic"), 1);
    let audit = json(&dir.path().join("audit.json"));
    assert_eq!(audit["failures"].as_array().unwrap().len(), 0);
    assert_eq!(audit["forms_checked"], 9);
}

#[test]
fn one_neuron_reach_bounds() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["reach", "--config", s(&fixture("one_neuron.analysis.toml")), "--out", s(dir.path())]);
    let p = json(&dir.path().join("polytope.json"));
    let b: Vec<f64> = p["offsets"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((b[0] - 1.0).abs() < 1e-6 && b[1].abs() < 1e-6, "{b:?}");
    assert_eq!(p["complete"], true);
    let csv = fs::read_to_string(dir.path().join("facets.csv")).unwrap();
    assert!(csv.starts_with("# seed 0\na_0,b,status\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn artifacts_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = fixture("random.analysis.toml");
    for dir in [&a, &b] {
        run_ok(&["reach", "--config", s(&cfg), "--out", s(dir.path()), "--workers", "2"]);
        run_ok(&["characterize", "--config", s(&fixture("sat.recipe.toml")), "--out", s(dir.path())]);
    }
    for name in ["polytope.json", "facets.csv", "samples.csv", "candidates.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
    let log = fs::read_to_string(a.path().join("run.log")).unwrap();
    assert!(log.contains("reach wall_time_s="));
}

#[test]
fn seed_override_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["characterize", "--config", s(&fixture("sat.recipe.toml")), "--seed", "9", "--out", s(dir.path())]);
    assert_eq!(json(&dir.path().join("candidates.json"))["seed"], 9);
}

#[test]
fn safety_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["safety", "--config", s(&fixture("tied.analysis.toml")), "--out", s(dir.path())]);
    let v = json(&dir.path().join("safety.json"));
    let d = &v["disjunctions"][0];
    assert_eq!(d["verdict"], "verified");
    assert!(d["multipliers"][0].as_f64().unwrap() > 0.5);

    // y = relu(x) <= 0.5 fails at x = 1
    let cfg = dir.path().join("unsafe.toml");
    fs::write(
        &cfg,
        format!(
            "network = {:?}\ninput = {:?}\n[[safety.halfspace]]\nc = [1.0]\nd = 0.5\n",
            s(&fixture("one_neuron.net.json")),
            s(&fixture("unit.box.toml"))
        ),
    )
    .unwrap();
    let out = run(&cli(&["safety", "--config", s(&cfg), "--out", s(dir.path())])).unwrap();
    assert_eq!(out.status, ExitStatus::VerificationFailures);
    assert_eq!(json(&dir.path().join("safety.json"))["halfspaces"][0]["verdict"], "unknown");
}

#[test]
fn tighten_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("random.analysis.toml");
    run_ok(&["tighten", "--config", s(&cfg), "--out", s(dir.path())]);
    let t = json(&dir.path().join("tighten.json"));
    assert_eq!(t["sampled_violations"], 0);
    assert!(t["report"]["neurons"].as_array().unwrap().iter().all(|n| n["reduction"].as_f64().unwrap() >= 0.0));
    run_ok(&["report", "--config", s(&cfg), "--out", s(dir.path())]);
    let r = json(&dir.path().join("report.json"));
    let w: Vec<f64> = r["methods"].as_array().unwrap().iter().map(|m| m["widths"][0].as_f64().unwrap()).collect();
    assert!(w[2] <= w[1] + 1e-6 && w[1] <= w[0] + 1e-6, "{w:?}");
    assert!(fs::read_to_string(dir.path().join("report.md")).unwrap().contains("| COMB-PP |"));
}

#[test]
fn nnet_smoke_reach() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["reach", "--config", s(&fixture("smoke.analysis.toml")), "--out", s(dir.path())]);
    assert!(json(&dir.path().join("polytope.json"))["sampled_violation"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn tanh_family_reach() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["verify", "--config", s(&fixture("tanh.recipe.toml")), "--out", s(dir.path())]);
    let net = r#"{
  "format": "qcert-network/1",
  "input_dim": 2,
  "layers": [
    { "activation": "tanh", "weights": [[1.0, -0.5], [0.3, 0.8], [-1.2, 0.4]], "bias": [0.1, 0.0, -0.2] },
    { "activation": "tanh", "weights": [[0.5, -1.0, 0.7], [1.1, 0.2, -0.4]], "bias": [0.0, 0.3] }
  ],
  "output": { "weights": [[1.0, -1.0], [0.5, 0.5]], "bias": [0.0, 0.0] }
}
"#;
    fs::write(dir.path().join("net.json"), net).unwrap();
    let cfg = dir.path().join("reach.toml");
    fs::write(
        &cfg,
        format!(
            "network = \"net.json\"\ninput = {{ lo = [-1.0, -1.0], hi = [1.0, 1.0] }}\nsamples = 20000\n\
             [directions]\nkind = \"plane\"\nplane = [0, 1]\ncount = 16\n\
             [family]\nverified = \"verified.json\"\nrelation = {:?}\n",
            s(&fixture("tanh.relation.toml"))
        ),
    )
    .unwrap();
    run_ok(&["reach", "--config", s(&cfg), "--out", s(dir.path())]);
    let p = json(&dir.path().join("polytope.json"));
    assert_eq!(p["method"], "family");
    assert_eq!(p["offsets"].as_array().unwrap().len(), 16);
    assert!(p["sampled_violation"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn exit_codes() {
    let bin = env!("CARGO_BIN_EXE_qcert");
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| Process::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(code(&["reach", "--config", "does-not-exist.toml", "--out", s(dir.path())]), Some(4));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "network = 3\n").unwrap();
    assert_eq!(code(&["reach", "--config", s(&bad), "--out", s(dir.path())]), Some(4));
    assert_eq!(
        code(&["reach", "--config", s(&fixture("one_neuron.analysis.toml")), "--out", s(dir.path())]),
        Some(0)
    );
    assert_eq!(code(&["reach", "--out", s(dir.path())]), Some(4));
}
