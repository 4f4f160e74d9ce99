use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cylcert"))
}

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(name)
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn certify(input: &Path, output: &Path, extra: &[&str]) -> Output {
    bin().arg("certify").arg("--input").arg(input).arg("--output").arg(output).args(extra).output().unwrap()
}

fn verify(problem: &Path, cert: &Path, tier: &str) -> Output {
    bin().arg("verify").arg("--problem").arg(problem).arg("--certificate").arg(cert).args(["--tier", tier]).output().unwrap()
}

#[test]
fn certify_then_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let problem = corpus("r1_interval.json");
    let cert = dir.path().join("cert.json");
    let out = certify(&problem, &cert, &["--tier", "exact"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["tier"], "exact");
    let out = verify(&problem, &cert, "exact");
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["residual"], "0");
}

#[test]
fn truncated_certificate_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let problem = corpus("r1_interval.json");
    let cert = dir.path().join("cert.json");
    assert_eq!(certify(&problem, &cert, &[]).status.code(), Some(0));
    let text = std::fs::read_to_string(&cert).unwrap();
    std::fs::write(&cert, &text[..text.len() / 2]).unwrap();
    assert_eq!(verify(&problem, &cert, "numeric").status.code(), Some(20));
}

#[test]
fn exact_demand_on_a_numeric_certificate_fails() {
    let dir = tempfile::tempdir().unwrap();
    let problem = corpus("r1_interval.json");
    let cert = dir.path().join("cert.json");
    assert_eq!(certify(&problem, &cert, &[]).status.code(), Some(0));
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&cert).unwrap()).unwrap();
    v["tier"] = json!("numeric");
    v["residual"] = json!("0");
    std::fs::write(&cert, serde_json::to_string(&v).unwrap()).unwrap();
    let out = verify(&problem, &cert, "exact");
    assert_eq!(out.status.code(), Some(15));
    assert_eq!(stdout_json(&out)["kind"], "TIER_INSUFFICIENT");
    assert_eq!(verify(&problem, &cert, "numeric").status.code(), Some(0));
}

#[test]
fn degenerate_leading_form_is_refused() {
    // (Y1 Y2)^2 + 1 vanishes at infinity along the axes
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("p.json");
    let p = json!({
        "n": 1, "variant": "quartic_r2", "m": 4, "r": 2, "frame": "simplex",
        "f": [{"c": "1", "x": [0], "y1": [2, 2]}, {"c": "1", "x": [0], "y1": [0, 0]}],
        "g": [[{"c": "-1", "x": [2]}, {"c": "3/4", "x": [1]}, {"c": "-1/8", "x": [0]}]],
        "archimedean_attested": true
    });
    std::fs::write(&problem, p.to_string()).unwrap();
    let out = certify(&problem, &dir.path().join("c.json"), &[]);
    assert_eq!(out.status.code(), Some(11), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!dir.path().join("c.json").exists());
}

#[test]
fn nonpositive_objective_reports_a_witness() {
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("p.json");
    let p = json!({
        "n": 1, "variant": "r1_any_m", "m": 2, "r": 1, "frame": "simplex",
        "f": [{"c": "1", "x": [0], "y1": [2]}, {"c": "-1", "x": [0], "y1": [0]}],
        "g": [[{"c": "-1", "x": [2]}, {"c": "3/4", "x": [1]}, {"c": "-1/8", "x": [0]}]],
        "archimedean_attested": true
    });
    std::fs::write(&problem, p.to_string()).unwrap();
    let out = certify(&problem, &dir.path().join("c.json"), &[]);
    assert_eq!(out.status.code(), Some(12));
    assert!(!stdout_json(&out)["witness"].is_null());
}

#[test]
fn bound_command_prints_the_formula_value() {
    let out = bin().args(["bound", "--theorem", "1.2", "--d", "1", "--m", "2", "--n", "1", "--fnorm", "1", "--fstar", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["exponent_upper"], "9");
    let approx = v["value_approx"].as_f64().unwrap();
    assert!(approx >= 6.0 * 9f64.exp() && approx <= 6.0 * 9f64.exp() * (1.0 + 1e-8));
    let out = bin().args(["bound", "--theorem", "9.9", "--d", "1", "--n", "1", "--fnorm", "1", "--fstar", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(10));
}

#[test]
fn same_input_and_output_path_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("p.json");
    std::fs::copy(corpus("r1_interval.json"), &problem).unwrap();
    assert_eq!(certify(&problem, &problem, &[]).status.code(), Some(10));
}
