use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_impact-sde"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn simulate(out: &Path, workers: &str) {
    let status = binary()
        .args(["simulate", "--paths", "100", "--dt", "0.001", "--seed", "7", "--config"])
        .arg(config("exponential.toml"))
        .arg("--out")
        .arg(out)
        .env("IMPACT_SDE_WORKERS", workers)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
}

#[test]
fn simulate_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    simulate(&a, "1");
    simulate(&b, "1");
    simulate(&c, "3");
    let ra = read_dir_sorted(&a);
    assert!(ra.iter().any(|(n, _)| n == "path_00000.csv"));
    assert!(ra.iter().any(|(n, _)| n == "summary.txt"));
    assert_eq!(ra, read_dir_sorted(&b));
    assert_eq!(ra, read_dir_sorted(&c));
    let (_, bytes) = ra.iter().find(|(n, _)| n == "path_00000.csv").unwrap();
    let csv = String::from_utf8(bytes.clone()).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# config_sha256="));
    assert_eq!(lines.next().unwrap(), "t,B,U1,U2,cash,v1,v2,Q1,stopped");
}

#[test]
fn check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = binary()
        .arg("check")
        .arg("--config")
        .arg(config("exponential.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("verdict: PASS"));
    assert!(dir.path().join("check.txt").exists());

    let fail = binary()
        .args(["check", "--theorem", "3", "--config"])
        .arg(config("sin_square.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(fail.status.code(), Some(1));
}

#[test]
fn bad_configs_exit_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[[agents]]\nfamily = \"exponential\"\na = 1.0\n[modell]\n").unwrap();
    let out = binary().arg("fields").arg("--config").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model"), "{err}");

    let missing = binary().arg("simulate").arg("--config").arg(dir.path().join("none.toml")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let negative = binary()
        .args(["simulate", "--dt", "-0.1", "--config"])
        .arg(config("exponential.toml"))
        .output()
        .unwrap();
    assert_eq!(negative.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&negative.stderr).contains("sim.dt"));
}

#[test]
fn fields_table_has_fixed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = binary()
        .arg("fields")
        .arg("--config")
        .arg(config("exponential.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("fields.csv")).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[1], "t,z,v1,v2,x,q1,F,Fx,Fv1,Fv2,H,Hv1,Hv2,K1,K2");
    // 3 times x 3 levels x 2 weight vectors x 2 cash levels x 1 position
    assert_eq!(lines.len(), 2 + 36);
    assert!(lines[2..].iter().all(|l| l.split(',').count() == 15));
}
