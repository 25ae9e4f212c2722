use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mpmp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpmp")).args(args).output().expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Drops the fields that legitimately differ between runs.
fn strip_volatile(mut v: Value) -> Value {
    let obj = v.as_object_mut().unwrap();
    obj.remove("version");
    obj.remove("elapsed_seconds");
    v
}

#[test]
fn warga_switching_direction_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = mpmp(&["check-so-integral", "--problem", "@warga", "--direction", "@warga_direction", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out);
    assert_eq!(r["verdict"], "fail");
    assert!((r["second_order"]["lhs"].as_f64().unwrap() - 0.25).abs() < 1e-6);
    assert!(String::from_utf8_lossy(&o.stdout).contains("overall"));
}

#[test]
fn euclidean_selftest_exits_zero() {
    let o = mpmp(&["geometry-selftest", "--manifold", "euclidean:3", "--samples", "50"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn missing_problem_exits_one_with_path() {
    let o = mpmp(&["check-pmp", "--problem", "/no/such/problem.toml"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("/no/such/problem.toml"), "{err}");
    assert!(err.contains("problem-model"), "{err}");
}

#[test]
fn malformed_problem_names_the_module() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "name = \"x\"\nn = 2\n").unwrap();
    let o = mpmp(&["check-pmp", "--problem", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("problem-model"));
}

#[test]
fn warga_pmp_passes_and_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let csv = dir.path().join("traj.csv");
    let o = mpmp(&["check-pmp", "--problem", "@warga", "--out", out.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let r = read_json(&out);
    assert_eq!(r["pmp"]["verdict"], "pass");
    assert!(!r["pmp"]["multipliers"].as_array().unwrap().is_empty());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x1,x2,u1,u2"));
    assert_eq!(lines.count(), 1025);
}

#[test]
fn report_matches_golden_modulo_stamps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = mpmp(&[
        "check-so-integral",
        "--problem",
        "@warga",
        "--direction",
        "@warga_direction",
        "--multiplier",
        "@warga_multiplier",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let golden: Value = serde_json::from_str(include_str!("golden/warga_integral.json")).unwrap();
    assert_eq!(strip_volatile(read_json(&out)), strip_volatile(golden));
    // Key order is part of the schema.
    let text = std::fs::read_to_string(&out).unwrap();
    let keys = ["\"schema\"", "\"command\"", "\"verdict\"", "\"second_order\"", "\"geometry\""];
    let pos: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn needle_csv_has_one_row_per_eps() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let o = mpmp(&[
        "verify-needle",
        "--problem",
        "@flat_lq",
        "--direction",
        "@flat_lq_direction",
        "--eps",
        "0.2,0.1,0.05",
        "--refine",
        "16",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(matches!(o.status.code(), Some(0 | 2)), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "eps,first_defect,second_defect,slope_so_far");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("2e-1,"));
}

#[test]
fn pointwise_needs_a_direction() {
    let o = mpmp(&["check-so-pointwise", "--problem", "@warga"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--direction"));
}

#[test]
fn pointwise_on_warga_rules_out_the_candidate() {
    let o = mpmp(&["check-so-pointwise", "--problem", "@warga", "--direction", "@warga_direction", "--multiplier", "@warga_multiplier"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sequential_flag_gives_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let base = ["check-so-integral", "--problem", "@flat_lq", "--direction", "@flat_lq_direction", "--out"];
    let mut args: Vec<&str> = base.to_vec();
    args.push(a.to_str().unwrap());
    mpmp(&args);
    args.pop();
    args.push(b.to_str().unwrap());
    args.push("--sequential");
    mpmp(&args);
    assert_eq!(strip_volatile(read_json(&a)), strip_volatile(read_json(&b)));
}
