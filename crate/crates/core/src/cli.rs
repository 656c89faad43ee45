//! Command-line front end.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::metrics::{self, RunRecord};
use crate::sim::{self, RunObserver};
use crate::trace::TraceWriter;
use crate::verify::{self, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROPERTY_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "splitzo", version, about = "Split federated zeroth-order training simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its run directory.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Also write a binary trace of every message.
        #[arg(long)]
        trace: bool,
    },
    /// Run the same experiment for several values of tau and compare rounds to target.
    SweepTau {
        config: PathBuf,
        /// Comma-separated tau values; defaults to `sweep.taus` from the config.
        #[arg(long, value_delimiter = ',')]
        taus: Vec<usize>,
        /// Single seed; defaults to `sweep.seeds`, then the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Target accuracy; defaults to `sweep.target`.
        #[arg(long)]
        target: Option<f64>,
    },
    /// Run a property suite.
    Verify {
        #[arg(value_enum)]
        suite: SuiteArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SuiteArg {
    Lemma1,
    Straggler,
    Reduction,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Suite {
        match s {
            SuiteArg::Lemma1 => Suite::Lemma1,
            SuiteArg::Straggler => Suite::Straggler,
            SuiteArg::Reduction => Suite::Reduction,
        }
    }
}

/// An error message paired with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn usage(message: impl ToString) -> Failure {
    Failure { code: EXIT_USAGE, message: message.to_string() }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return EXIT_OK;
            }
            let usage = Cli::command().render_usage().to_string();
            if !e.to_string().contains(&usage) {
                eprintln!("\n{usage}");
            }
            return EXIT_USAGE;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn execute(command: Command) -> Result<i32, Failure> {
    match command {
        Command::Run { config, seed, out, trace } => {
            let mut cfg = load_config(&config, seed)?;
            cfg.trace |= trace;
            let run = cmd_run(&cfg, &out, &run_id(&config, &cfg, None))?;
            println!("run directory: {}", run.dir.display());
            match run.final_accuracy {
                Some(acc) => println!("final accuracy: {acc:.4}"),
                None => println!("final accuracy: n/a"),
            }
            println!("total simulated time: {:.4}", run.total_time);
            Ok(EXIT_OK)
        }
        Command::SweepTau { config, taus, seed, out, target } => {
            let mut cfg = load_config(&config, seed)?;
            if !taus.is_empty() {
                cfg.sweep.taus = taus;
            }
            if let Some(s) = seed {
                cfg.sweep.seeds = vec![s];
            }
            if let Some(t) = target {
                cfg.sweep.target = t;
            }
            let report = cmd_sweep_tau(&cfg, &config, &out)?;
            print!("{}", report.text);
            println!("report: {}", report.path.display());
            Ok(EXIT_OK)
        }
        Command::Verify { suite } => {
            let checks = verify::run_suite(suite.into()).map_err(usage)?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            println!("{} of {} properties hold", checks.len() - failed, checks.len());
            Ok(if failed == 0 { EXIT_OK } else { EXIT_PROPERTY_FAILURE })
        }
    }
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    if !path.exists() {
        return Err(usage(format!("config file not found: {}", path.display())));
    }
    let mut cfg = ExperimentConfig::from_file(path).map_err(usage)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run_id(config_path: &Path, cfg: &ExperimentConfig, tau: Option<usize>) -> String {
    let stem = config_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    match tau {
        Some(t) => format!("{stem}-seed{}-tau{t}", cfg.seed),
        None => format!("{stem}-seed{}", cfg.seed),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub final_accuracy: Option<f64>,
    pub total_time: f64,
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    usage(format!("{}: {e}", path.display()))
}

/// Executes one run and writes `config.snapshot`, `records.csv` and
/// `summary.txt` (plus `trace.bin` when tracing) under `out/run_id`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, run_id: &str) -> Result<RunOutput, Failure> {
    let dir = out.join(run_id);
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    let snapshot = dir.join("config.snapshot");
    fs::write(&snapshot, cfg.to_snapshot()).map_err(|e| io_failure(&snapshot, e))?;

    let setup = sim::prepare(cfg).map_err(usage)?;
    let records = if cfg.trace {
        let path = dir.join("trace.bin");
        let mut writer = TraceWriter::create(&path).map_err(|e| io_failure(&path, e))?;
        let records = sim::run_rounds(cfg, &setup, &mut writer).map_err(usage)?;
        writer.flush().map_err(|e| io_failure(&path, e))?;
        records
    } else {
        struct Quiet;
        impl RunObserver for Quiet {}
        sim::run_rounds(cfg, &setup, &mut Quiet).map_err(usage)?
    };

    let records_path = dir.join("records.csv");
    metrics::write_records(&records, &records_path).map_err(usage)?;
    let final_accuracy = records.iter().rev().find_map(|r| r.eval_accuracy);
    let total_time = records.last().map_or(0.0, |r| r.simulated_time);
    let dims = setup.model.dims();
    let summary = [
        ("run_id", run_id.to_string()),
        ("seed", cfg.seed.to_string()),
        ("tau", cfg.protocol.tau.to_string()),
        ("rounds", records.len().to_string()),
        ("cut_layer", setup.model.cut().to_string()),
        ("client_params", dims.client.to_string()),
        ("server_params", dims.server.to_string()),
        ("eta_c", format!("{:?}", setup.rates.eta_c)),
        ("eta_s", format!("{:?}", setup.rates.eta_s)),
        ("eta_g", format!("{:?}", setup.rates.eta_g)),
        ("final_accuracy", final_accuracy.map_or(String::new(), |a| format!("{a:?}"))),
        ("total_simulated_time", format!("{total_time:?}")),
    ]
    .map(|(k, v)| (k.to_string(), v));
    metrics::write_summary(&dir.join("summary.txt"), &summary).map_err(usage)?;
    Ok(RunOutput { dir, records, final_accuracy, total_time })
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub runs: BTreeMap<usize, Vec<RunOutput>>,
    pub report: metrics::SpeedupReport,
    pub text: String,
    pub path: PathBuf,
}

/// One run per tau and seed, identical otherwise, followed by the speedup
/// table of median rounds to target.
pub fn cmd_sweep_tau(cfg: &ExperimentConfig, config_path: &Path, out: &Path) -> Result<SweepOutput, Failure> {
    let taus = &cfg.sweep.taus;
    if taus.is_empty() {
        return Err(usage("no tau values: pass --taus or set sweep.taus"));
    }
    let mut seen = BTreeSet::new();
    for &t in taus {
        if t == 0 {
            return Err(usage("tau values must be at least 1"));
        }
        if !seen.insert(t) {
            return Err(usage(format!("duplicate tau value {t}")));
        }
    }
    if !seen.contains(&1) {
        return Err(usage("the tau list must include the baseline tau = 1"));
    }
    let target = cfg.sweep.target;
    if !(target > 0.0 && target <= 1.0) {
        return Err(usage(format!("target accuracy must lie in (0, 1], got {target}")));
    }
    let seeds = if cfg.sweep.seeds.is_empty() { vec![cfg.seed] } else { cfg.sweep.seeds.clone() };
    let mut runs: BTreeMap<usize, Vec<RunOutput>> = BTreeMap::new();
    for &t in taus {
        for &seed in &seeds {
            let mut c = cfg.clone();
            c.protocol.tau = t;
            c.seed = seed;
            c.validate().map_err(usage)?;
            let run = cmd_run(&c, out, &run_id(config_path, &c, Some(t)))?;
            runs.entry(t).or_default().push(run);
        }
    }
    let by_tau: BTreeMap<usize, Vec<Vec<RunRecord>>> =
        runs.iter().map(|(t, r)| (*t, r.iter().map(|run| run.records.clone()).collect())).collect();
    let report = metrics::speedup_report_median(&by_tau, target).map_err(usage)?;
    let text = report.to_delimited();
    let stem = config_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let path = out.join(format!("{stem}-speedup.csv"));
    fs::write(&path, &text).map_err(|e| io_failure(&path, e))?;
    Ok(SweepOutput { runs, report, text, path })
}
