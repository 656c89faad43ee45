use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use splitzo::config::ExperimentConfig;
use splitzo::metrics;
use splitzo::trace::{read_trace_file, TraceEvent};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splitzo"))
}

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = r#"
rounds = 30
[model]
widths = [16, 8, 3]
[rates]
eta = 0.05
[data]
samples_per_class = 60
"#;

#[test]
fn missing_config_exits_2_and_names_path() {
    let o = run(&["run", "/definitely/not/here.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/not/here.toml"), "{}", stderr(&o));
}

#[test]
fn invalid_config_lists_field_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[protocol]\ntau = 0\n[federation]\nparticipation = 2.0\n");
    let o = run(&["run", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("protocol.tau") && err.contains("federation.participation"), "{err}");
}

#[test]
fn smoke_run_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", smoke().to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("final accuracy"));
    assert!(stdout(&o).contains("total simulated time"));
    let run_dir = dir.path().join("smoke-seed1");
    let recs = metrics::read_records(&run_dir.join("records.csv")).unwrap();
    assert_eq!(recs.len(), 1);
    assert!(run_dir.join("config.snapshot").exists());
    let summary = std::fs::read_to_string(run_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("rounds=1\n"));
}

#[test]
fn same_config_and_seed_give_identical_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    for out in ["a", "b"] {
        let o = run(&["run", cfg.to_str().unwrap(), "--seed", "5", "--out", dir.path().join(out).to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a/small-seed5/records.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/small-seed5/records.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn snapshot_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = run(&["run", cfg.to_str().unwrap(), "--seed", "9", "--out", dir.path().join("a").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let snap = dir.path().join("a/small-seed9/config.snapshot");
    let parsed = ExperimentConfig::from_file(&snap).unwrap();
    assert_eq!(parsed.seed, 9);
    assert_eq!(parsed.protocol.batch_size, 32);

    let copy = write_config(dir.path(), "again.toml", &std::fs::read_to_string(&snap).unwrap());
    let o = run(&["run", copy.to_str().unwrap(), "--out", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(dir.path().join("a/small-seed9/records.csv")).unwrap(),
        std::fs::read(dir.path().join("b/again-seed9/records.csv")).unwrap()
    );
}

#[test]
fn trace_flag_records_every_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = run(&["run", cfg.to_str().unwrap(), "--trace", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let events = read_trace_file(&dir.path().join("small-seed0/trace.bin")).unwrap();
    // 30 rounds, 5 participants, one uplink and one downlink each
    assert_eq!(events.len(), 30 * 5 * 2);
    for pair in events.chunks(2) {
        match (&pair[0], &pair[1]) {
            (TraceEvent::Up { round, client, message: up }, TraceEvent::Down { round: r2, client: c2, message: down }) => {
                assert_eq!((round, client), (r2, c2));
                assert_eq!(up.nonce, down.nonce);
                assert_eq!(up.h.rows(), up.labels.len());
            }
            other => panic!("unexpected order {other:?}"),
        }
    }
}

#[test]
fn sweep_single_tau_is_trivial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = run(&["sweep-tau", cfg.to_str().unwrap(), "--taus", "1", "--target", "0.5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("small-speedup.csv")).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("1,") && row.contains(",1.0000,"), "{text}");
}

#[test]
fn sweep_matches_individual_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("sweep");
    let o = run(&["sweep-tau", cfg.to_str().unwrap(), "--taus", "1,2,4", "--target", "0.6", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("small-speedup.csv")).unwrap();
    assert_eq!(report.lines().count(), 4);

    let mut rounds = Vec::new();
    for tau in [1, 2, 4] {
        let text = SMALL.replace("rounds = 30", &format!("rounds = 30\n[protocol]\ntau = {tau}"));
        let single = write_config(dir.path(), &format!("single{tau}.toml"), &text);
        let o = run(&["run", single.to_str().unwrap(), "--out", dir.path().join("single").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let recs = metrics::read_records(&dir.path().join(format!("single/single{tau}-seed0/records.csv"))).unwrap();
        let swept = metrics::read_records(&out.join(format!("small-seed0-tau{tau}/records.csv"))).unwrap();
        assert_eq!(recs, swept, "tau={tau}");
        rounds.push(metrics::rounds_to_target(&recs, 0.6).map(|t| t + 1));
    }
    for (line, r) in report.lines().skip(1).zip(&rounds) {
        let field = line.split(',').nth(1).unwrap();
        assert_eq!(field, r.map(|v| v.to_string()).unwrap_or_default(), "{report}");
    }
}

#[test]
fn sweep_rejects_duplicate_taus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = run(&["sweep-tau", cfg.to_str().unwrap(), "--taus", "1,2,2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("duplicate"), "{}", stderr(&o));
}

#[test]
fn verify_straggler_reports_zero_gap() {
    let o = run(&["verify", "straggler"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    let line = out.lines().find(|l| l.contains("identity gap, T0=100 t_straggler=8 t_server=2")).unwrap();
    assert!(line.starts_with("[PASS]") && line.contains("measured 0.000000e0"), "{line}");
}

#[test]
fn verify_reduction_passes() {
    let o = run(&["verify", "reduction"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let o = run(&["verify", "lemma9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).to_lowercase().contains("usage"), "{}", stderr(&o));
}
