use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_x402-testbed"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn attack2_reports_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(&["attack2", "--trials", "100", "--seed", "7"], d.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ra = std::fs::read(a.path().join("report_2.json")).unwrap();
    let rb = std::fs::read(b.path().join("report_2.json")).unwrap();
    assert_eq!(ra, rb);

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["subcommand"], "attack2");
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 1);
    assert_eq!(outputs[0]["path"], "report_2.json");
    let report: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(report["schema"], "x402-testbed.report.v1");
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["attack9"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn bad_config_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    let o = run(&["attack3", "--config", cfg.to_str().unwrap()], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());

    std::fs::write(&cfg, r#"{"grid": {"k": []}}"#).unwrap();
    let o = run(&["attack1a", "--config", cfg.to_str().unwrap()], d.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn csv_report_and_traces() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"grid": {"k": [0], "p_reorg": [0.5], "delta_ms": [0]}}"#).unwrap();
    let o = run(
        &["attack1a", "--trace-samples", "3", "--trials", "50", "--format", "csv", "--config", cfg.to_str().unwrap()],
        d.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(d.path().join("report_1a.csv")).unwrap();
    assert!(r.headers().unwrap().iter().any(|h| h == "rgp_successes"));
    assert!(r.records().count() > 0);
    let trace = std::fs::read_to_string(d.path().join("trace_1a.jsonl")).unwrap();
    assert_eq!(trace.lines().filter(|l| l.contains("\"run_end\"")).count(), 3);
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["t", "actor", "event"] {
            assert!(v.get(key).is_some(), "{line}");
        }
    }
}
