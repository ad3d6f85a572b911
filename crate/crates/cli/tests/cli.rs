use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rpslab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpslab"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn check_passes_on_the_three_stage_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = rpslab(dir.path(), &["check", "--preset", "ex5_5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let kappa = json(&dir.path().join("report.json"))["report"]["kappa"].as_f64().unwrap();
    assert!((0.9085..=0.9087).contains(&kappa), "{kappa}");
    assert!(fs::read_to_string(dir.path().join("report.txt")).unwrap().contains("PASS"));
}

#[test]
fn check_fails_on_a_strong_goodwin_loop() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("goodwin_v100.spec");
    fs::write(
        &spec,
        "[system] d=3 T=2pi\n[drift]\nrow=-8,0,0\nrow=1,-9,0\nrow=0,1,-10\n[noise k=1]\ndiag=1/2,0,0\n[noise k=2]\ndiag=0,1/4,0\n\
         [noise k=3]\ndiag=0,0,1/3\n[feedback]\nkind=goodwin\nV=100\nK=3\nm=3\n",
    )
    .unwrap();
    let out = rpslab(dir.path(), &["check", "--spec", spec.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(json(&dir.path().join("report.json"))["report"]["kappa"].as_f64().unwrap() > 1.0);
}

#[test]
fn errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rpslab(dir.path(), &["check", "--spec", "/no/such/file.spec"]).status.code(), Some(1));
    assert_eq!(rpslab(dir.path(), &["check"]).status.code(), Some(1));
    assert_eq!(rpslab(dir.path(), &["check", "--preset", "nope"]).status.code(), Some(1));
    assert_eq!(rpslab(dir.path(), &["simulate", "--preset", "ex5_5", "--x0", "1,2"]).status.code(), Some(1));
    assert_eq!(rpslab(dir.path(), &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn report_with_nothing_to_collate() {
    let dir = tempfile::tempdir().unwrap();
    let out = rpslab(dir.path(), &["report"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing to report"));
}

#[test]
fn report_collates_earlier_runs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(rpslab(dir.path(), &["check", "--preset", "goodwin"]).status.success());
    assert!(rpslab(dir.path(), &["simulate", "--preset", "goodwin", "--paths", "2"]).status.success());
    assert!(rpslab(dir.path(), &["report"]).status.success());
    let s = json(&dir.path().join("summary.json"));
    let runs = s["runs"].as_object().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs["simulate"]["provenance"]["seed"], 1);
    assert_eq!(runs["check"]["provenance"]["system"], "preset:goodwin");
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let args: [&[&str]; 3] = [
            &["simulate", "--preset", "othmer_tyson", "--paths", "4", "--seed", "7"],
            &["pullback", "--preset", "othmer_tyson", "--paths", "4", "--nmax", "3", "--seed", "7"],
            &["fixpoint", "--preset", "othmer_tyson", "--paths", "4", "--seed", "7"],
        ];
        for a in args {
            let out = rpslab(dir, a);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        }
    }
    let one = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rpslab"))
        .args(["simulate", "--preset", "othmer_tyson", "--paths", "4", "--seed", "7", "--out"])
        .arg(one.path())
        .env("RPSLAB_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    let sa = snapshot(a.path());
    assert_eq!(sa.len(), 7);
    assert_eq!(sa, snapshot(b.path()));
    assert_eq!(fs::read(one.path().join("trajectories.csv")).unwrap(), fs::read(a.path().join("trajectories.csv")).unwrap());
}

#[test]
fn noiseless_simulation_is_the_euler_recursion() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("ode.spec");
    fs::write(&spec, "[system] d=1 T=1\n[drift]\nrow=-1\n[feedback]\nkind=custom\nexpr1=1\n").unwrap();
    let out = rpslab(dir.path(), &["simulate", "--spec", spec.to_str().unwrap(), "--paths", "2", "--dt", "0.01", "--x0", "3", "--t-end", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text.lines().skip(1).map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2 * 201);
    let mut x = 3.0f64;
    for (n, r) in rows[..201].iter().enumerate() {
        assert!((r[2] - x).abs() < 1e-12, "step {n}: {} vs {x}", r[2]);
        assert_eq!(r[2], rows[201 + n][2]);
        x += (1.0 - x) * 0.01;
    }
}

#[test]
fn three_stage_smoke_run_is_finite_and_nonnegative() {
    let dir = tempfile::tempdir().unwrap();
    let out = rpslab(dir.path(), &["simulate", "--preset", "ex5_5", "--paths", "10", "--t-end", "12.566370614359172"]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let cells: Vec<f64> = line.split(',').skip(2).map(|c| c.parse().unwrap()).collect();
        assert!(cells.iter().all(|v| v.is_finite() && *v >= 0.0));
        rows += 1;
    }
    assert_eq!(rows, 10 * (2 * 628 + 1));
    let s = json(&dir.path().join("simulate.json"));
    assert_eq!(s["nonnegative"], true);
}

#[test]
fn fixpoint_residuals_decay_geometrically() {
    let dir = tempfile::tempdir().unwrap();
    let out = rpslab(dir.path(), &["fixpoint", "--preset", "ex5_5", "--paths", "64", "--tol", "1e-12"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("fixpoint_residuals.csv")).unwrap();
    let ratios: Vec<f64> = text.lines().skip(2).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(!ratios.is_empty());
    assert!(ratios.iter().all(|r| *r <= 0.95), "{ratios:?}");
    let s = json(&dir.path().join("fixpoint.json"));
    assert_eq!(s["picard"]["converged"], true);
    let q = fs::read_to_string(dir.path().join("fixpoint_quantiles.csv")).unwrap();
    assert_eq!(q.lines().count(), 629);
}

#[test]
fn single_horizon_pullback_has_no_fit() {
    let dir = tempfile::tempdir().unwrap();
    let out = rpslab(dir.path(), &["pullback", "--preset", "goodwin", "--paths", "4", "--nmax", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json(&dir.path().join("pullback.json"));
    assert!(s["summary"]["rate_fit"].is_null());
    assert_eq!(s["summary"]["rows"].as_array().unwrap().len(), 1);
    let csv = fs::read_to_string(dir.path().join("pullback.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}
