use std::path::Path;
use std::process::{Command, Output};

use gossip_sgd::config::parse_config;
use gossip_sgd::simulator::TraceRecord;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gossip-sgd"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = "[run]\nprotocol = \"pull-gossip\"\nsteps = 30\ntrials = 2\n[hyper]\np = 4\nalpha0 = 0.05\n[noise]\nvariance = 0.01\n";

#[test]
fn run_writes_outputs_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = write_config(dir.path(), SMALL);
    let out = bin()
        .arg("run")
        .arg(&cfg)
        .env("GOSSIP_SGD_OUTPUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("2 trials of pull-gossip"));

    let lines: Vec<TraceRecord> = std::fs::read_to_string(out_dir.join("trace.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2 * 31);
    assert_eq!(lines.iter().filter(|r| r.t == 0).count(), 2);
    assert!(lines.iter().all(|r| r.run_id.starts_with("trial-")));

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let echo = parse_config(summary["config"].as_str().unwrap()).unwrap();
    assert_eq!(echo.run.steps, 30);
    assert_eq!(echo.hyper.p, 4);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[run]\nprotocol = \"downpour\"\n[hyper]\np = 4\nalpha0 = 0.1\n");
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown protocol"));

    let missing = bin().arg("run").arg(dir.path().join("absent.toml")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));

    // No closed-form bound covers all-reduce.
    let cfg = write_config(dir.path(), &SMALL.replace("pull-gossip", "all-reduce"));
    let out = bin()
        .arg("validate-bounds")
        .arg(&cfg)
        .env("GOSSIP_SGD_OUTPUT_DIR", dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validate_bounds_reports_a_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[run]\nprotocol = \"pull-gossip\"\nsteps = 100\ntrials = 40\n\
         [hyper]\np = 4\nalpha0 = 0.05\nmu = 0.0\nweight_decay = 0.0\n\
         [noise]\nvariance = 0.01\n[init]\nsq_err = 4.0\n",
    );
    let out = bin()
        .arg("validate-bounds")
        .arg(&cfg)
        .env("GOSSIP_SGD_OUTPUT_DIR", dir.path().join("out"))
        .output()
        .unwrap();
    let text = stdout(&out);
    assert!(text.contains("bound verdict: pass"), "{text}");
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("out/bound_report.json").exists());
}

#[test]
fn failed_bound_validation_exits_one() {
    // The displayed async-pull rule damps each gradient step by (1 - beta), so the
    // per-event optimality bound is not met once the slow mode dominates.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[run]\nprotocol = \"async-pull\"\nsteps = 2000\ntrials = 40\ntrace_every = 50\n\
         [hyper]\np = 8\nalpha0 = 0.05\nmu = 0.0\nweight_decay = 0.0\nbeta_gossip = 0.5\n\
         [noise]\nvariance = 0.01\n[init]\nsq_err = 8.0\n",
    );
    let out = bin()
        .arg("validate-bounds")
        .arg(&cfg)
        .env("GOSSIP_SGD_OUTPUT_DIR", dir.path().join("out"))
        .output()
        .unwrap();
    assert!(stdout(&out).contains("bound verdict: FAIL"));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn diagnose_mixing_prints_lambdas() {
    let out = bin().args(["diagnose-mixing", "--p", "4", "--beta", "0.5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("lambda_theorem = 0.75"), "{text}");
    assert!(text.contains("lambda_diag = 0.84375"), "{text}");

    let out = bin().args(["diagnose-mixing", "--p", "9", "--beta", "0.5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
