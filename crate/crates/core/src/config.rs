//! Experiment configuration: sectioned `key = value` text (TOML).
//!
//! Every field has a default, so a config file only needs the values it
//! changes. [`ExperimentConfig::to_snapshot`] writes the full effective
//! configuration, which parses back to an identical value.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Heterogeneity;
use crate::model::Activation;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config:\n{}", format_issues(.0))]
    Invalid(Vec<ConfigIssue>),
}

/// One validation failure, located by its dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Number of global rounds `T`.
    pub rounds: usize,
    /// Evaluate held-out accuracy every this many rounds (and on the last round).
    pub eval_interval: usize,
    /// Write a binary trace of every uplink/downlink message.
    pub trace: bool,
    pub model: ModelConfig,
    pub protocol: ProtocolConfig,
    pub rates: RatesConfig,
    pub federation: FederationConfig,
    pub delay: DelayConfig,
    pub data: DataConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            rounds: 100,
            eval_interval: 1,
            trace: false,
            model: ModelConfig::default(),
            protocol: ProtocolConfig::default(),
            rates: RatesConfig::default(),
            federation: FederationConfig::default(),
            delay: DelayConfig::default(),
            data: DataConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `[input, hidden.., classes]`
    pub widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub cut_layer: CutChoice,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { widths: vec![16, 16, 3], hidden_activation: Activation::Tanh, cut_layer: CutChoice::Layer(1) }
    }
}

/// Explicit cut index, or `"auto"` to pick the cut closest to `sqrt(d / tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CutRepr", into = "CutRepr")]
pub enum CutChoice {
    Auto,
    Layer(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CutRepr {
    Layer(usize),
    Keyword(String),
}

impl TryFrom<CutRepr> for CutChoice {
    type Error = String;
    fn try_from(r: CutRepr) -> Result<Self, String> {
        match r {
            CutRepr::Layer(l) => Ok(CutChoice::Layer(l)),
            CutRepr::Keyword(k) if k == "auto" => Ok(CutChoice::Auto),
            CutRepr::Keyword(k) => Err(format!("expected a layer index or \"auto\", found {k:?}")),
        }
    }
}

impl From<CutChoice> for CutRepr {
    fn from(c: CutChoice) -> Self {
        match c {
            CutChoice::Auto => CutRepr::Keyword("auto".into()),
            CutChoice::Layer(l) => CutRepr::Layer(l),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Server steps per communication round.
    pub tau: usize,
    pub lambda: f64,
    /// Directions averaged per server step.
    pub num_perturbations: usize,
    pub batch_size: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig { tau: 1, lambda: 0.005, num_perturbations: 1, batch_size: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMode {
    /// `eta_s = eta`, `eta_c = tau * eta`.
    TheoryCoupled,
    /// `eta_s` and `eta_c` taken verbatim.
    Fixed,
}

/// Global aggregation rate: a number, or `"theory"` for `sqrt(tau * M)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RateRepr", into = "RateRepr")]
pub enum GlobalRate {
    Value(f64),
    Theory,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RateRepr {
    Value(f64),
    Keyword(String),
}

impl TryFrom<RateRepr> for GlobalRate {
    type Error = String;
    fn try_from(r: RateRepr) -> Result<Self, String> {
        match r {
            RateRepr::Value(v) => Ok(GlobalRate::Value(v)),
            RateRepr::Keyword(k) if k == "theory" => Ok(GlobalRate::Theory),
            RateRepr::Keyword(k) => Err(format!("expected a number or \"theory\", found {k:?}")),
        }
    }
}

impl From<GlobalRate> for RateRepr {
    fn from(g: GlobalRate) -> Self {
        match g {
            GlobalRate::Value(v) => RateRepr::Value(v),
            GlobalRate::Theory => RateRepr::Keyword("theory".into()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RatesConfig {
    pub mode: RateMode,
    /// Base rate for the coupled mode.
    pub eta: f64,
    pub eta_s: f64,
    pub eta_c: f64,
    pub eta_g: GlobalRate,
}

impl Default for RatesConfig {
    fn default() -> Self {
        RatesConfig { mode: RateMode::TheoryCoupled, eta: 0.01, eta_s: 0.01, eta_c: 0.005, eta_g: GlobalRate::Value(0.3) }
    }
}

/// Concrete learning rates for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub eta_c: f64,
    pub eta_s: f64,
    pub eta_g: f64,
}

impl RatesConfig {
    pub fn resolve(&self, tau: usize, clients: usize) -> LearningRates {
        let (eta_c, eta_s) = match self.mode {
            RateMode::TheoryCoupled => (tau as f64 * self.eta, self.eta),
            RateMode::Fixed => (self.eta_c, self.eta_s),
        };
        let eta_g = match self.eta_g {
            GlobalRate::Value(v) => v,
            GlobalRate::Theory => ((tau * clients) as f64).sqrt(),
        };
        LearningRates { eta_c, eta_s, eta_g }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    /// Total number of clients `M`.
    pub clients: usize,
    /// Fraction of clients selected each round.
    pub participation: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig { clients: 10, participation: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelayKind {
    Exponential,
    Fixed,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DelayConfig {
    pub kind: DelayKind,
    /// Simulated time of one server step.
    pub server_step_time: f64,
    /// Per-client mean delays. Empty: `base_mean` for every client if set,
    /// otherwise log-spaced over `[1, 8] * server_step_time`.
    pub client_means: Vec<f64>,
    pub base_mean: Option<f64>,
    /// Client whose mean is multiplied by `straggler_factor`.
    pub straggler: Option<usize>,
    pub straggler_factor: f64,
    /// Constant exchange overhead added to every round.
    pub overhead: f64,
}

impl Default for DelayConfig {
    fn default() -> Self {
        DelayConfig {
            kind: DelayKind::Exponential,
            server_step_time: 1.0,
            client_means: Vec::new(),
            base_mean: None,
            straggler: None,
            straggler_factor: 4.0,
            overhead: 0.0,
        }
    }
}

impl DelayConfig {
    /// Mean delay of every client after defaults and the straggler override.
    pub fn resolved_means(&self, clients: usize) -> Vec<f64> {
        let mut means = if !self.client_means.is_empty() {
            self.client_means.clone()
        } else if let Some(base) = self.base_mean {
            vec![base; clients]
        } else if clients == 1 {
            vec![self.server_step_time]
        } else {
            let ratio = 8f64.ln() / (clients - 1) as f64;
            (0..clients).map(|m| self.server_step_time * (ratio * m as f64).exp()).collect()
        };
        if let Some(s) = self.straggler {
            if let Some(v) = means.get_mut(s) {
                *v *= self.straggler_factor;
            }
        }
        means
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Blobs,
    Csv,
}

/// Client data split: `"iid"` or a Dirichlet concentration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RateRepr", into = "RateRepr")]
pub enum PartitionChoice {
    Iid,
    Dirichlet(f64),
}

impl TryFrom<RateRepr> for PartitionChoice {
    type Error = String;
    fn try_from(r: RateRepr) -> Result<Self, String> {
        match r {
            RateRepr::Value(v) => Ok(PartitionChoice::Dirichlet(v)),
            RateRepr::Keyword(k) if k == "iid" => Ok(PartitionChoice::Iid),
            RateRepr::Keyword(k) => Err(format!("expected a Dirichlet alpha or \"iid\", found {k:?}")),
        }
    }
}

impl From<PartitionChoice> for RateRepr {
    fn from(p: PartitionChoice) -> Self {
        match p {
            PartitionChoice::Iid => RateRepr::Keyword("iid".into()),
            PartitionChoice::Dirichlet(a) => RateRepr::Value(a),
        }
    }
}

impl From<PartitionChoice> for Heterogeneity {
    fn from(p: PartitionChoice) -> Self {
        match p {
            PartitionChoice::Iid => Heterogeneity::Iid,
            PartitionChoice::Dirichlet(a) => Heterogeneity::Dirichlet(a),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Seed for data generation, holdout and partition; the run seed when absent.
    pub seed: Option<u64>,
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub spread: f64,
    pub path: String,
    pub label_column: String,
    pub holdout: f64,
    pub partition: PartitionChoice,
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Blobs,
            seed: None,
            classes: 3,
            dim: 16,
            samples_per_class: 200,
            spread: 1.0,
            path: String::new(),
            label_column: "label".into(),
            holdout: 0.2,
            partition: PartitionChoice::Iid,
            standardize: true,
        }
    }
}

/// Defaults for `sweep-tau`; command-line flags take precedence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub taus: Vec<usize>,
    /// Seeds to repeat every tau with; medians are reported. Empty: the run seed.
    pub seeds: Vec<u64>,
    /// Held-out accuracy that defines "reached".
    pub target: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { taus: Vec::new(), seeds: Vec::new(), target: 0.85 }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    /// Full effective configuration, defaults included.
    pub fn to_snapshot(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn rates(&self) -> LearningRates {
        self.rates.resolve(self.protocol.tau, self.federation.clients)
    }

    /// Checks every range constraint and reports all violations at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let mut check = |ok: bool, path: &str, message: String| {
            if !ok {
                issues.push(ConfigIssue { path: path.into(), message });
            }
        };
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let non_negative = |v: f64| v >= 0.0 && v.is_finite();

        check(self.eval_interval >= 1, "eval_interval", "must be at least 1".into());

        let m = &self.model;
        check(m.widths.len() >= 3, "model.widths", format!("need at least two dense layers, found {} widths", m.widths.len()));
        check(m.widths.iter().all(|&w| w > 0), "model.widths", "all widths must be positive".into());
        if let CutChoice::Layer(c) = m.cut_layer {
            let max = m.widths.len().saturating_sub(2);
            check(c >= 1 && c <= max, "model.cut_layer", format!("must lie in 1..={max}, found {c}"));
        }

        let p = &self.protocol;
        check(p.tau >= 1, "protocol.tau", "must be at least 1".into());
        check(positive(p.lambda), "protocol.lambda", format!("must be positive, found {}", p.lambda));
        check(p.num_perturbations >= 1, "protocol.num_perturbations", "must be at least 1".into());
        check(p.batch_size >= 1, "protocol.batch_size", "must be at least 1".into());

        let r = &self.rates;
        match r.mode {
            RateMode::TheoryCoupled => check(non_negative(r.eta), "rates.eta", format!("must be non-negative, found {}", r.eta)),
            RateMode::Fixed => {
                check(non_negative(r.eta_s), "rates.eta_s", format!("must be non-negative, found {}", r.eta_s));
                check(non_negative(r.eta_c), "rates.eta_c", format!("must be non-negative, found {}", r.eta_c));
            }
        }
        if let GlobalRate::Value(g) = r.eta_g {
            check(positive(g), "rates.eta_g", format!("must be positive, found {g}"));
        }

        let f = &self.federation;
        check(f.clients >= 1, "federation.clients", "must be at least 1".into());
        check(
            f.participation > 0.0 && f.participation <= 1.0,
            "federation.participation",
            format!("must lie in (0, 1], found {}", f.participation),
        );

        let d = &self.delay;
        check(positive(d.server_step_time), "delay.server_step_time", format!("must be positive, found {}", d.server_step_time));
        check(non_negative(d.overhead), "delay.overhead", format!("must be non-negative, found {}", d.overhead));
        check(positive(d.straggler_factor), "delay.straggler_factor", format!("must be positive, found {}", d.straggler_factor));
        if !d.client_means.is_empty() {
            check(
                d.client_means.len() == f.clients,
                "delay.client_means",
                format!("has {} entries for {} clients", d.client_means.len(), f.clients),
            );
            check(d.client_means.iter().all(|&v| positive(v)), "delay.client_means", "all means must be positive".into());
        }
        if let Some(b) = d.base_mean {
            check(positive(b), "delay.base_mean", format!("must be positive, found {b}"));
        }
        if let Some(s) = d.straggler {
            check(s < f.clients, "delay.straggler", format!("client {s} does not exist among {} clients", f.clients));
        }

        let data = &self.data;
        check(
            data.holdout > 0.0 && data.holdout < 1.0,
            "data.holdout",
            format!("must lie in (0, 1), found {}", data.holdout),
        );
        if let PartitionChoice::Dirichlet(a) = data.partition {
            check(positive(a), "data.partition", format!("Dirichlet alpha must be positive, found {a}"));
        }
        match data.source {
            DataSource::Blobs => {
                check(data.classes >= 2, "data.classes", "must be at least 2".into());
                check(data.dim >= 1, "data.dim", "must be at least 1".into());
                check(data.samples_per_class >= 1, "data.samples_per_class", "must be at least 1".into());
                check(non_negative(data.spread), "data.spread", format!("must be non-negative, found {}", data.spread));
                if let (Some(&first), Some(&last)) = (m.widths.first(), m.widths.last()) {
                    check(first == data.dim, "model.widths", format!("input width {first} does not match data.dim {}", data.dim));
                    check(last == data.classes, "model.widths", format!("output width {last} does not match data.classes {}", data.classes));
                }
            }
            DataSource::Csv => check(!data.path.is_empty(), "data.path", "required when data.source = \"csv\"".into()),
        }

        let s = &self.sweep;
        check(s.target > 0.0 && s.target <= 1.0, "sweep.target", format!("must lie in (0, 1], found {}", s.target));
        check(s.taus.iter().all(|&t| t >= 1), "sweep.taus", "all values must be at least 1".into());
        let mut distinct = s.taus.clone();
        distinct.sort_unstable();
        distinct.dedup();
        check(distinct.len() == s.taus.len(), "sweep.taus", "duplicate values".into());

        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }
}
