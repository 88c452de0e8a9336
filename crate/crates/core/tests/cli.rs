use std::fs;
use std::process::Command;

fn lcfed() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lcfed"))
}

const TINY: [&str; 7] = [
    "--set=sites=2",
    "--set=samples_per_site=10",
    "--set=image_size=16",
    "--set=widths=2,4",
    "--set=batch=4",
    "--set=checkpoint_every=1",
    "--set=dtype=f64",
];

#[test]
fn run_stop_resume_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let st = lcfed()
        .args(["run", "--rounds", "2", "--stop-after", "1", "--out"])
        .arg(&out)
        .args(TINY)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(out.join("checkpoint_r0001.ckpt").exists());
    assert!(!out.join("summary.txt").exists());

    let st = lcfed().arg("resume").arg(out.join("checkpoint_r0001.ckpt")).status().unwrap();
    assert!(st.success());
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("site0") && summary.contains("avg"));
    let rows = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(rows.starts_with("# config "));
    assert_eq!(rows.lines().count(), 2 + 2 * 2);

    let before = fs::read(out.join("curves.csv")).unwrap();
    assert!(lcfed().arg("report").arg(&out).status().unwrap().success());
    assert_eq!(fs::read(out.join("curves.csv")).unwrap(), before);
}

#[test]
fn config_file_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = lcfed().arg("defaults").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("lambda = 0.1") && text.contains("nms_delta = 11"));
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, text).unwrap();
    let bad = lcfed().arg("run").arg(&cfg).args(["--set", "lambda=-1"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("lambda"));
}

#[test]
fn rejects_unknown_mode_and_key() {
    let o = lcfed().args(["run", "--mode", "fedprox"]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("fedprox"));
    let o = lcfed().args(["run", "--set", "nope=1"]).output().unwrap();
    assert!(!o.status.success());
}

#[test]
fn gen_data_writes_a_loadable_directory() {
    let dir = tempfile::tempdir().unwrap();
    let st = lcfed()
        .args(["gen-data", "--sites", "2", "--samples", "5", "--size", "16", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(st.success());
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
}
