//! Drives the `coder-consensus` binary end to end on the sample session with
//! the mock backend.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coder_consensus::experiment::{read_traces, TraceEntry};
use coder_consensus::ConsensusOutcome;
use tempfile::TempDir;

const SEGMENTS: usize = 10;
const CATEGORIES: usize = 8;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_coder-consensus"));
    cmd.env_remove("CODER_CONSENSUS_BASE_URL").env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A scratch directory holding a copy of the sample session and its config.
fn workspace() -> TempDir {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/demo");
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(src).unwrap() {
        let p = entry.unwrap().path();
        fs::copy(&p, dir.path().join(p.file_name().unwrap())).unwrap();
    }
    dir
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn config(ws: &TempDir) -> PathBuf {
    ws.path().join("config.toml")
}

fn run_sweep(ws: &TempDir, out: &Path, extra: &[&str]) -> Output {
    let cfg = config(ws);
    let mut args = vec!["run", "--config", p(&cfg), "--out-dir", p(out)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn validate_accepts_the_sample_setup() {
    let ws = workspace();
    let out = run(&["validate", "--config", p(&config(&ws))]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("all checks passed"));
}

#[test]
fn validate_names_the_segment_missing_from_ground_truth() {
    let ws = workspace();
    let gt = ws.path().join("ground_truth.csv");
    let text = fs::read_to_string(&gt).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("7,")).collect();
    fs::write(&gt, kept.join("\n") + "\n").unwrap();

    let out = run(&["validate", "--config", p(&config(&ws))]);
    assert_eq!(code(&out), 1);
    let text = stdout(&out);
    assert!(text.contains("[FAIL]") && text.contains("ground truth"), "{text}");
    assert!(text.contains('7'), "the missing segment is named: {text}");
}

#[test]
fn validate_rejects_a_malformed_base_url() {
    let ws = workspace();
    let out = run(&["validate", "--config", p(&config(&ws)), "--backend", "http", "--base-url", "not a url"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("[FAIL]"), "{}", stdout(&out));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let ws = workspace();
    let cfg = config(&ws);
    let mut text = fs::read_to_string(&cfg).unwrap();
    text.push_str("temprature = 0.3\n");
    fs::write(&cfg, text).unwrap();
    let out = run(&["validate", "--config", p(&cfg)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("temprature"), "{}", stderr(&out));
}

#[test]
fn full_mock_sweep_then_resume_is_a_no_op() {
    let ws = workspace();
    let out_dir = ws.path().join("out");
    let out = run_sweep(&ws, &out_dir, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = fs::read_to_string(out_dir.join("decisions.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 18 * SEGMENTS * CATEGORIES);
    assert_eq!(fs::read_dir(out_dir.join("traces")).unwrap().count(), 18);

    let again = run_sweep(&ws, &out_dir, &[]);
    assert_eq!(code(&again), 1, "an existing run is not overwritten silently");
    assert!(stderr(&again).contains("--resume"), "{}", stderr(&again));

    let resumed = run_sweep(&ws, &out_dir, &["--resume"]);
    assert_eq!(code(&resumed), 0);
    assert!(stdout(&resumed).contains("executed 0 configuration(s), skipped 18"), "{}", stdout(&resumed));
    assert_eq!(fs::read_to_string(out_dir.join("decisions.csv")).unwrap(), table);
}

#[test]
fn interrupted_sweep_resumes_to_the_same_table() {
    let ws = workspace();
    let straight = ws.path().join("straight");
    assert_eq!(code(&run_sweep(&ws, &straight, &[])), 0);

    let partial = ws.path().join("partial");
    let first = run_sweep(&ws, &partial, &["--max-configs", "5"]);
    assert_eq!(code(&first), 2, "an unfinished run exits 2");
    assert!(stdout(&first).contains("rerun with --resume"));
    let rest = run_sweep(&ws, &partial, &["--resume", "--workers", "2"]);
    assert_eq!(code(&rest), 0, "{}", stderr(&rest));
    assert_eq!(
        fs::read(partial.join("decisions.csv")).unwrap(),
        fs::read(straight.join("decisions.csv")).unwrap()
    );
    assert_eq!(
        fs::read(partial.join("manifest.toml")).unwrap(),
        fs::read(straight.join("manifest.toml")).unwrap()
    );
}

#[test]
fn transport_failure_exits_2_and_keeps_completed_rows() {
    let ws = workspace();
    let out_dir = ws.path().join("out");
    let script = ws.path().join("flaky_mock.toml");
    let out = run_sweep(&ws, &out_dir, &["--mock-script", p(&script)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stdout(&out).contains("run incomplete"));
    let table = fs::read_to_string(out_dir.join("decisions.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 18 * (SEGMENTS - 1) * CATEGORIES);
}

#[test]
fn unreachable_endpoint_fails_the_run_with_exit_2() {
    let ws = workspace();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}");
    let out = run_sweep(&ws, &ws.path().join("out"), &["--backend", "http", "--base-url", &url]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn analyze_writes_tables_and_rejects_bad_input() {
    let ws = workspace();
    let out_dir = ws.path().join("out");
    assert_eq!(code(&run_sweep(&ws, &out_dir, &[])), 0);
    let table = out_dir.join("decisions.csv");
    let metrics = ws.path().join("metrics");
    let out = run(&["analyze", p(&table), "--out-dir", p(&metrics)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["agreement.csv", "consensus_freq.csv", "alignment_diff.csv", "contrasts.csv", "rq1_export.csv", "rq2_export.csv"] {
        assert!(metrics.join(name).is_file(), "{name} written");
    }
    let excluded = run(&["analyze", p(&table), "--out-dir", p(&metrics), "--missing-policy", "exclude", "--pairing-unit", "config"]);
    assert_eq!(code(&excluded), 0, "{}", stderr(&excluded));

    let empty = ws.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&run(&["analyze", p(&empty), "--out-dir", p(&metrics)])), 1);

    let text = fs::read_to_string(&table).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    let no_outcome = ws.path().join("no_outcome.csv");
    fs::write(&no_outcome, stripped).unwrap();
    let out = run(&["analyze", p(&no_outcome), "--out-dir", p(&metrics)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("outcome"), "{}", stderr(&out));
}

#[test]
fn trace_renders_deliberations() {
    let ws = workspace();
    let out_dir = ws.path().join("out");
    assert_eq!(code(&run_sweep(&ws, &out_dir, &[])), 0);

    let mut seen_none = false;
    let mut seen_first = false;
    for entry in fs::read_dir(out_dir.join("traces")).unwrap() {
        let path = entry.unwrap().path();
        for t in read_traces(&path).unwrap() {
            let TraceEntry::Completed(t) = t else { continue };
            let wanted = match t.outcome {
                ConsensusOutcome::NoConsensus if !seen_none => &mut seen_none,
                ConsensusOutcome::FirstConsensus if !seen_first => &mut seen_first,
                _ => continue,
            };
            *wanted = true;
            let out = run(&["trace", p(&path), &t.segment_id.to_string()]);
            assert_eq!(code(&out), 0);
            let text = stdout(&out);
            let rounds = text.lines().filter(|l| l.starts_with("round ")).count();
            match t.outcome {
                ConsensusOutcome::NoConsensus => {
                    assert!(text.contains("arbiter") && text.contains("outcome: no_consensus"), "{text}");
                    assert_eq!(rounds, 2 * t.max_rounds as usize);
                }
                _ => {
                    assert!(!text.contains("arbiter"), "{text}");
                    assert_eq!(rounds, 2);
                }
            }
        }
    }
    assert!(seen_none && seen_first, "the sweep produced both outcomes");

    let missing = run(&["trace", p(&out_dir.join("traces").join("mock-model__t0.0__bold-bold.jsonl")), "999"]);
    assert_eq!(code(&missing), 1);

    let templates = run(&["trace", "--show-templates"]);
    assert_eq!(code(&templates), 0);
    assert_eq!(stdout(&templates).matches("===== ").count(), 4);
}

#[test]
fn mock_demo_shows_the_extraction_pathologies() {
    let out = run(&["mock-demo"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("1 duplicate label(s) (1 conflicting), 2 extraneous label(s)"), "{text}");
}
