//! The `glshrink` binary run as a subprocess.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const PANEL: &str = "area,source,estimate,se
01001,BR,0.21,0.020
01001,SA,0.24,0.030
01003,BR,0.18,0.015
01003,SA,0.20,0.040
01005,BR,0.33,0.025
01005,SA,0.29,0.035
01007,BR,0.26,0.010
01007,SA,0.27,0.020
01009,BR,0.15,0.030
01009,SA,0.19,0.050
";

fn glshrink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glshrink"))
        .args(args)
        .env_remove("GLSHRINK_WORKERS")
        .output()
        .unwrap()
}

fn panel(dir: &Path) -> String {
    let p = dir.join("panel.csv");
    fs::write(&p, PANEL).unwrap();
    p.to_str().unwrap().to_string()
}

fn fit_args<'a>(panel: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "fit", "--panel", panel, "--model", "m12,m1a", "--chains", "2", "--iters", "400", "--burnin", "100",
        "--seed", "5", "--out", out,
    ]
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn replay_reproduces_a_fit_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let panel = panel(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let first = glshrink(&fit_args(&panel, a.to_str().unwrap()));
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let manifest = a.join("manifest.json");
    let again = glshrink(&[
        "replay", "--manifest", manifest.to_str().unwrap(), "--out", b.to_str().unwrap(), "--workers", "1",
    ]);
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.iter().any(|(p, _)| p == Path::new("summary_m12.csv")));
    assert_eq!(fa, fb);
}

#[test]
fn single_site_scan_is_recorded_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let panel = panel(dir.path());
    let out = dir.path().join("s");
    let mut args = fit_args(&panel, out.to_str().unwrap());
    args.push("--single-site");
    assert!(glshrink(&args).status.success());
    let m = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(m.contains("single-site"), "{m}");
}

#[test]
fn bad_panel_fails_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, PANEL.replace("01005,SA,0.29,0.035", "01005,SA,0.29,-1")).unwrap();
    let out = dir.path().join("o");
    let r = glshrink(&fit_args(p.to_str().unwrap(), out.to_str().unwrap()));
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("bad.csv:7:"), "{err}");
}

#[test]
fn malformed_worker_count_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let panel = panel(dir.path());
    let out = dir.path().join("o");
    let r = Command::new(env!("CARGO_BIN_EXE_glshrink"))
        .args(fit_args(&panel, out.to_str().unwrap()))
        .env("GLSHRINK_WORKERS", "abc")
        .output()
        .unwrap();
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("GLSHRINK_WORKERS"));
}

#[test]
fn stopped_simulation_exits_with_three_then_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let out = out.to_str().unwrap();
    let base = [
        "simulate", "--case", "1", "--specs", "1", "--replicates", "2", "--iters", "200", "--burnin", "50",
        "--seed", "3", "--out", out,
    ];
    let mut stop = base.to_vec();
    stop.extend(["--stop-after", "4"]);
    assert_eq!(glshrink(&stop).status.code(), Some(3));
    let mut resume = base.to_vec();
    resume.push("--resume");
    let r = glshrink(&resume);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(Path::new(out).join("ratios_arb.csv").exists());
}
