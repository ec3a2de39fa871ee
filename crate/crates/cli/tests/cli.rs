use std::path::Path;
use std::process::{Command, Output};

fn qsa(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsa")).args(args).env("QSA_OUTPUT_ROOT", root).output().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_verify_plotdata_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", "name = \"sol\"\nseed = 3\n[experiment]\nkind = \"solidarity\"\ndt = 1e-3\n");
    let out = qsa(&["run", &cfg], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS gap-smallest-over-largest-alpha"), "{stdout}");

    let manifest = dir.path().join("sol").join("manifest.json");
    assert!(manifest.exists());
    let m = manifest.to_str().unwrap();
    let out = qsa(&["verify", m], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS reproducible:solidarity.csv"));

    let csv = dir.path().join("plot.csv");
    let out = qsa(&["plotdata", m, "-o", csv.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let text = std::fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("experiment,series,x,y"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn failing_check_gives_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    // a tolerance no run can meet
    let cfg = write(dir.path(), "o.toml", "name = \"ode\"\n[experiment]\nkind = \"ode-at-infinity\"\nradii = [1e6]\ndt = 1e-3\ntolerance = 1e-12\n");
    let out = qsa(&["run", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn bad_configs_are_reported_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.toml", "");
    let out = qsa(&["run", &empty], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("invalid config") || err.contains("missing field"), "{err}");

    let typo = write(dir.path(), "typo.toml", "name = \"t\"\n[experiment]\nkind = \"pmf-verify\"\nomgea = 0.1\n");
    let out = qsa(&["run", &typo], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("omgea"));
}

#[test]
fn output_dir_flag_overrides_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "p.toml", "name = \"p\"\n[experiment]\nkind = \"pmf-verify\"\nvariants = [\"A\"]\nhorizon = 100.0\n");
    let target = dir.path().join("elsewhere");
    let out = qsa(&["run", &cfg, "--output-dir", target.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(target.join("manifest.json").exists());
    assert!(!dir.path().join("p").exists());
}
