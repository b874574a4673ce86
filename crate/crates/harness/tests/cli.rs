use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/bench.toml")
}

fn out_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mica-cli-test-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn cli(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mica-bench"))
        .args(args)
        .arg("--config")
        .arg(config())
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn topology_filter_limits_the_report() {
    let out = out_dir("filter");
    let o = cli(&["bench", "--topology", "mica_core"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("bench_report.csv")).unwrap();
    let rows: Vec<&str> = csv
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect();
    assert_eq!(rows.len(), 6);
    assert!(rows
        .iter()
        .all(|r| r.split(',').nth(1) == Some("mica_core")));
    let _ = std::fs::remove_dir_all(out);
}

#[test]
fn report_verb_rebuilds_identical_reports_from_traces() {
    let out = out_dir("report");
    assert!(
        cli(&["bench", "--topology", "mica_core,debate_voting"], &out)
            .status
            .success()
    );
    let before = std::fs::read(out.join("bench_report.csv")).unwrap();
    std::fs::remove_file(out.join("bench_report.csv")).unwrap();
    let o = cli(&["report", "--topology", "mica_core,debate_voting"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(out.join("bench_report.csv")).unwrap(), before);
    let _ = std::fs::remove_dir_all(out);
}

#[test]
fn asf_eval_writes_reports_and_state() {
    let out = out_dir("asf");
    let o = cli(&["asf-eval"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["asf_report.txt", "asf_report.csv", "asf_state.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("S4"));
    let _ = std::fs::remove_dir_all(out);
}

#[test]
fn unknown_topology_is_rejected() {
    let out = out_dir("bad-topology");
    let o = cli(&["bench", "--topology", "star"], &out);
    assert!(!o.status.success());
}

#[test]
fn missing_config_reports_an_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_mica-bench"))
        .args(["bench", "--config", "/nonexistent/bench.toml"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/bench.toml"));
}
