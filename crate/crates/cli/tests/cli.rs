use std::fs;
use std::path::{Path, PathBuf};

use poincare_lab_cli::{exit_code_of, run};
use serde_json::Value;

fn corpus(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(name).display().to_string()
}

fn run_in(dir: &Path, args: &[&str]) -> (i32, Value) {
    let mut argv: Vec<String> = vec!["poincare-lab".into()];
    argv.extend(args.iter().map(|s| s.to_string()));
    argv.extend(["--jobs".into(), "1".into(), "--out".into(), dir.display().to_string()]);
    let code = run(argv);
    let report = fs::read_to_string(dir.join("report.json")).map(|s| serde_json::from_str(&s).unwrap());
    (code, report.unwrap_or(Value::Null))
}

fn out() -> (tempfile::TempDir, PathBuf) {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().join("out");
    (t, p)
}

#[test]
fn check_cusp_passes_with_expected_bound() {
    let (_t, dir) = out();
    let (code, report) = run_in(&dir, &["check", "--spec", &corpus("cusp.dom"), "--t", "0.5", "--p", "2", "--res", "256", "--dir", "e2"]);
    assert_eq!(code, 0);
    assert_eq!(exit_code_of(&report), 0);
    let bound = report["result"]["theorem"]["bound"].as_f64().unwrap();
    assert!((bound - 2f64.sqrt() * 0.5).abs() < 2.0 / 256.0);
}

#[test]
fn regdir_on_circle_fails() {
    let (_t, dir) = out();
    let (code, report) = run_in(&dir, &["regdir", "--spec", &corpus("circle.dom"), "--dirs", "256", "--samples", "1024"]);
    assert_eq!(code, 1);
    assert_eq!(report["error"]["kind"], "no-regular-direction");
    assert_eq!(report["result"]["no_regular_direction"], true);
}

#[test]
fn missing_spec_is_a_usage_error() {
    let (_t, dir) = out();
    let (code, report) = run_in(&dir, &["sweep", "--spec", "/nonexistent/missing.dom"]);
    assert_eq!(code, 2);
    assert_eq!(report["status"], "usage-error");
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(run(["poincare-lab", "frobnicate"]), 2);
    assert_eq!(run(["poincare-lab", "check"]), 2);
    let (_t, dir) = out();
    let (code, _) = run_in(&dir, &["thickness", "--spec", &corpus("disk.dom"), "--dir", "e7"]);
    assert_eq!(code, 2);
    let (code, _) = run_in(&dir, &["check", "--spec", &corpus("cusp.dom"), "--t", "3"]);
    assert_eq!(code, 2);
}

#[test]
fn raster_writes_mask_files() {
    let (_t, dir) = out();
    let (code, report) = run_in(&dir, &["raster", "--spec", &corpus("disk.dom"), "--res", "32"]);
    assert_eq!(code, 0);
    let bin = fs::read(dir.join("mask.bin")).unwrap();
    assert_eq!(bin.len(), 32 * 32);
    let interior = bin.iter().filter(|&&b| b == 1).count();
    assert_eq!(report["result"]["raster"]["interior_cells"].as_u64().unwrap() as usize, interior);
    assert!(fs::read(dir.join("mask.pgm")).unwrap().starts_with(b"P5\n32 32\n255\n"));
    let side: Value = serde_json::from_str(&fs::read_to_string(dir.join("mask.json")).unwrap()).unwrap();
    assert_eq!(side["dims"], serde_json::json!([32, 32]));
}

#[test]
fn sweep_writes_table_and_plots() {
    let (_t, dir) = out();
    let (code, report) = run_in(
        &dir,
        &["sweep", "--spec", &corpus("cusp.dom"), "--grid", "3", "--res", "48", "--dir", "e2", "--samples", "256"],
    );
    assert_eq!(code, 0);
    let csv = fs::read_to_string(dir.join("fibers.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("t,empty,h,volume"));
    let plot = fs::read_to_string(dir.join("plot_ratio.dat")).unwrap();
    assert_eq!(plot.lines().count(), 4);
    assert_eq!(report["result"]["records"].as_array().unwrap().len(), 3);
}

#[test]
fn cells_exports_json_and_dot() {
    let (_t, dir) = out();
    let (code, report) = run_in(&dir, &["cells", "--spec", &corpus("two_disks.dom"), "--res", "128"]);
    assert_eq!(code, 0);
    assert_eq!(report["result"]["inside_cells_merged"], 2);
    assert!(dir.join("cells.dot").exists());
    assert!(dir.join("cells.json").exists());
}

#[test]
fn jobs_env_is_validated() {
    let (_t, dir) = out();
    let mut argv: Vec<String> = ["poincare-lab", "raster", "--spec"].map(String::from).to_vec();
    argv.push(corpus("disk.dom"));
    argv.extend(["--res", "16", "--jobs", "0", "--out"].map(String::from));
    argv.push(dir.display().to_string());
    assert_eq!(run(argv), 2);
}
