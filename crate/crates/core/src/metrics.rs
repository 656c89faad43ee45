//! Per-round records, their on-disk form, and round-count comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("speedup report needs a tau = 1 baseline run")]
    MissingBaseline,
}

/// Metrics for one global round, taken after aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub round: usize,
    pub comm_rounds: usize,
    /// Cumulative simulated time at the end of this round.
    pub simulated_time: f64,
    pub round_time: f64,
    pub straggler_time: f64,
    pub server_busy_time: f64,
    pub participants: usize,
    pub train_loss: f64,
    /// Held-out accuracy of the global model; `None` on rounds that were not evaluated.
    pub eval_accuracy: Option<f64>,
    pub uplink_matrices: usize,
    pub uplink_scalars: usize,
    pub downlink_scalars: usize,
}

pub const RECORD_HEADER: &str = "round,comm_rounds,simulated_time,round_time,straggler_time,server_busy_time,participants,train_loss,eval_accuracy,uplink_matrices,uplink_scalars,downlink_scalars";

/// 17 significant digits: enough to round-trip any `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn format_records(records: &[RunRecord]) -> String {
    let mut out = String::with_capacity(64 + records.len() * 200);
    out.push_str(RECORD_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.comm_rounds,
            fmt_f64(r.simulated_time),
            fmt_f64(r.round_time),
            fmt_f64(r.straggler_time),
            fmt_f64(r.server_busy_time),
            r.participants,
            fmt_f64(r.train_loss),
            r.eval_accuracy.map(fmt_f64).unwrap_or_default(),
            r.uplink_matrices,
            r.uplink_scalars,
            r.downlink_scalars,
        );
    }
    out
}

pub fn write_records(records: &[RunRecord], path: &Path) -> Result<(), MetricsError> {
    std::fs::write(path, format_records(records)).map_err(|source| MetricsError::Write { path: path.display().to_string(), source })
}

pub fn parse_records(text: &str) -> Result<Vec<RunRecord>, MetricsError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RECORD_HEADER => {}
        _ => return Err(MetricsError::Parse { line: 1, message: "missing or unexpected header".into() }),
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let err = |message: String| MetricsError::Parse { line: line_no, message };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(err(format!("expected 12 fields, found {}", fields.len())));
        }
        let int = |k: usize| fields[k].parse::<usize>().map_err(|e| err(format!("field {}: {e}", k + 1)));
        let real = |k: usize| fields[k].parse::<f64>().map_err(|e| err(format!("field {}: {e}", k + 1)));
        records.push(RunRecord {
            round: int(0)?,
            comm_rounds: int(1)?,
            simulated_time: real(2)?,
            round_time: real(3)?,
            straggler_time: real(4)?,
            server_busy_time: real(5)?,
            participants: int(6)?,
            train_loss: real(7)?,
            eval_accuracy: if fields[8].is_empty() { None } else { Some(real(8)?) },
            uplink_matrices: int(9)?,
            uplink_scalars: int(10)?,
            downlink_scalars: int(11)?,
        });
    }
    Ok(records)
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Read { path: path.display().to_string(), source })?;
    parse_records(&text)
}

/// Index of the first round whose held-out accuracy reaches `target`.
pub fn rounds_to_target(records: &[RunRecord], target: f64) -> Option<usize> {
    records.iter().find(|r| r.eval_accuracy.is_some_and(|a| a >= target)).map(|r| r.round)
}

/// Most recent evaluated accuracy at or before simulated time `time`.
pub fn accuracy_at_time(records: &[RunRecord], time: f64) -> Option<f64> {
    records
        .iter()
        .take_while(|r| r.simulated_time <= time)
        .filter_map(|r| r.eval_accuracy)
        .last()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub tau: usize,
    /// Communication rounds used to reach the target (`round index + 1`).
    pub rounds: Option<usize>,
    /// `rounds(tau = 1) / rounds(tau)`.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupReport {
    pub target: f64,
    pub rows: Vec<SpeedupRow>,
}

impl SpeedupReport {
    /// Plot-ready delimited text. Unreached targets leave `rounds` and `ratio`
    /// blank and are flagged in the last column.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("tau,rounds,ratio,flag\n");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                row.tau,
                row.rounds.map(|r| r.to_string()).unwrap_or_default(),
                row.ratio.map(|r| format!("{r:.4}")).unwrap_or_default(),
                if row.rounds.is_none() { "not-reached" } else if row.ratio.is_none() { "no-baseline" } else { "" }
            );
        }
        out
    }

    pub fn row(&self, tau: usize) -> Option<&SpeedupRow> {
        self.rows.iter().find(|r| r.tau == tau)
    }
}

/// Speedup table over runs keyed by `tau`. The map must contain `tau = 1`.
pub fn speedup_report(runs: &BTreeMap<usize, Vec<RunRecord>>, target: f64) -> Result<SpeedupReport, MetricsError> {
    let rounds: BTreeMap<usize, Option<usize>> =
        runs.iter().map(|(&tau, recs)| (tau, rounds_to_target(recs, target).map(|t| t + 1))).collect();
    let baseline = *rounds.get(&1).ok_or(MetricsError::MissingBaseline)?;
    Ok(speedup_from_rounds(&rounds, baseline, target))
}

/// Median over seeds, treating "not reached" as larger than any round count.
/// With an even number of runs the lower of the two middle values is used.
pub fn median_rounds(values: &[Option<usize>]) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by_key(|v| v.unwrap_or(usize::MAX));
    sorted[(sorted.len() - 1) / 2]
}

/// Speedup table over several seeds per `tau`, using median rounds to target.
pub fn speedup_report_median(runs: &BTreeMap<usize, Vec<Vec<RunRecord>>>, target: f64) -> Result<SpeedupReport, MetricsError> {
    let rounds: BTreeMap<usize, Option<usize>> = runs
        .iter()
        .map(|(&tau, seeds)| {
            let per_seed: Vec<Option<usize>> = seeds.iter().map(|r| rounds_to_target(r, target).map(|t| t + 1)).collect();
            (tau, median_rounds(&per_seed))
        })
        .collect();
    let baseline = *rounds.get(&1).ok_or(MetricsError::MissingBaseline)?;
    Ok(speedup_from_rounds(&rounds, baseline, target))
}

pub(crate) fn speedup_from_rounds(rounds: &BTreeMap<usize, Option<usize>>, baseline: Option<usize>, target: f64) -> SpeedupReport {
    let rows = rounds
        .iter()
        .map(|(&tau, &r)| SpeedupRow {
            tau,
            rounds: r,
            ratio: match (baseline, r) {
                (Some(b), Some(r)) => Some(b as f64 / r as f64),
                _ => None,
            },
        })
        .collect();
    SpeedupReport { target, rows }
}

/// Flat `key=value` summary file, one pair per line in the given order.
pub fn write_summary(path: &Path, entries: &[(String, String)]) -> Result<(), MetricsError> {
    let mut out = String::new();
    for (k, v) in entries {
        let _ = writeln!(out, "{k}={v}");
    }
    std::fs::write(path, out).map_err(|source| MetricsError::Write { path: path.display().to_string(), source })
}
