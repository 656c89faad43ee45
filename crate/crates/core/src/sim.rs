//! Round simulator: participant selection, per-client compute delays, pair
//! rounds, aggregation and the simulated wall clock.
//!
//! Time is dimensionless and simulated. A round lasts as long as the slower of
//! the straggling client and the server's `tau` steps, plus a constant
//! exchange overhead.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use thiserror::Error;

use crate::aggregation::{self, AggregationError, GlobalState, ParticipantUpdate};
use crate::config::{ConfigError, ConfigIssue, CutChoice, DataSource, DelayKind, ExperimentConfig, LearningRates};
use crate::data::{self, DataError, Dataset, LabelColumn, PartitionPlan};
use crate::metrics::RunRecord;
use crate::model::{recommend_cut, Architecture, Batch, ModelError, SplitModel};
use crate::protocol::{
    self, ClientRoundState, DownLink, PairRoundOutcome, ProtocolError, ServerRoundState, UpLink,
};
use crate::rng::{stream, Role, StreamRng};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("round {round}, client {client}: {source}")]
    Protocol { round: usize, client: usize, source: ProtocolError },
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error("invalid delay model: {0}")]
    InvalidDelay(String),
    #[error("times must satisfy t_straggler >= t_server > 0, got t_straggler = {t_straggler}, t_server = {t_server}")]
    InvalidTimes { t_straggler: f64, t_server: f64 },
    #[error("no participants")]
    NoParticipants,
    #[error("trace: {0}")]
    Trace(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayDistribution {
    /// Exponential draws with the client's mean.
    Exponential,
    /// Every draw equals the client's mean.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayModel {
    distribution: DelayDistribution,
    means: Vec<f64>,
    server_step_time: f64,
    overhead: f64,
}

impl DelayModel {
    pub fn new(distribution: DelayDistribution, means: Vec<f64>, server_step_time: f64) -> Result<Self, SimError> {
        if means.is_empty() {
            return Err(SimError::InvalidDelay("no client means".into()));
        }
        if let Some(m) = means.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(SimError::InvalidDelay(format!("client mean must be positive, got {m}")));
        }
        if !(server_step_time > 0.0 && server_step_time.is_finite()) {
            return Err(SimError::InvalidDelay(format!("server step time must be positive, got {server_step_time}")));
        }
        Ok(DelayModel { distribution, means, server_step_time, overhead: 0.0 })
    }

    pub fn with_overhead(mut self, overhead: f64) -> Result<Self, SimError> {
        if !(overhead >= 0.0 && overhead.is_finite()) {
            return Err(SimError::InvalidDelay(format!("overhead must be non-negative, got {overhead}")));
        }
        self.overhead = overhead;
        Ok(self)
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, SimError> {
        let distribution = match cfg.delay.kind {
            DelayKind::Exponential => DelayDistribution::Exponential,
            DelayKind::Fixed => DelayDistribution::Fixed,
        };
        DelayModel::new(distribution, cfg.delay.resolved_means(cfg.federation.clients), cfg.delay.server_step_time)?
            .with_overhead(cfg.delay.overhead)
    }

    pub fn distribution(&self) -> DelayDistribution {
        self.distribution
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn server_step_time(&self) -> f64 {
        self.server_step_time
    }

    pub fn overhead(&self) -> f64 {
        self.overhead
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTiming {
    /// One delay per participant, in participant order.
    pub client_times: Vec<f64>,
    pub straggler_time: f64,
    pub server_busy_time: f64,
    pub round_wall_clock: f64,
}

impl RoundTiming {
    /// Time the split server spends waiting for the straggler.
    pub fn server_idle_time(&self) -> f64 {
        (self.straggler_time - self.server_busy_time).max(0.0)
    }
}

pub fn draw_round_timing<R: Rng + ?Sized>(
    model: &DelayModel,
    participants: &[usize],
    tau: usize,
    rng: &mut R,
) -> Result<RoundTiming, SimError> {
    if participants.is_empty() {
        return Err(SimError::NoParticipants);
    }
    let mut client_times = Vec::with_capacity(participants.len());
    for &m in participants {
        let mean = *model
            .means
            .get(m)
            .ok_or_else(|| SimError::InvalidDelay(format!("no delay mean for client {m}")))?;
        let t = match model.distribution {
            DelayDistribution::Exponential => {
                let e: f64 = Exp1.sample(rng);
                mean * e
            }
            DelayDistribution::Fixed => mean,
        };
        client_times.push(t);
    }
    let straggler_time = client_times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let server_busy_time = tau as f64 * model.server_step_time;
    let round_wall_clock = straggler_time.max(server_busy_time) + model.overhead;
    Ok(RoundTiming { client_times, straggler_time, server_busy_time, round_wall_clock })
}

/// `round(slowest mean / t_server)`, at least 1: the server steps that fit in
/// the time the slowest client takes on average.
pub fn matched_tau(model: &DelayModel) -> usize {
    let slowest = model.means.iter().copied().fold(0.0, f64::max);
    ((slowest / model.server_step_time).round() as usize).max(1)
}

/// Mean server idle time per round over `rounds` rounds. Delay draws depend
/// only on `(seed, round)`, so calls differing only in `tau` are paired.
pub fn mean_idle_time(model: &DelayModel, participants: &[usize], tau: usize, rounds: usize, seed: u64) -> Result<f64, SimError> {
    let mut total = 0.0;
    for t in 0..rounds {
        let timing = draw_round_timing(model, participants, tau, &mut stream(seed, Role::Delay, 0, t as u64))?;
        total += timing.server_idle_time();
    }
    Ok(total / rounds.max(1) as f64)
}

/// Result of trading communication rounds for server steps against a straggler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StragglerIdentity {
    pub tau: usize,
    pub t1: usize,
    pub total_time: f64,
    /// `T0 * t_server`: the time the server alone needs for `T0` steps.
    pub reference: f64,
    /// `|total_time - reference| / reference`.
    pub relative_gap: f64,
}

/// With `tau = round(t_straggler / t_server)`, `T1 = ceil(T0 / tau)` rounds of
/// length `t_straggler` take `T1 * t_straggler`, which equals `T0 * t_server`
/// whenever the ratio is integral and divides `T0`.
pub fn straggler_identity_check(t0: usize, t_straggler: f64, t_server: f64) -> Result<StragglerIdentity, SimError> {
    if !(t_server > 0.0 && t_server.is_finite() && t_straggler >= t_server && t_straggler.is_finite()) {
        return Err(SimError::InvalidTimes { t_straggler, t_server });
    }
    let tau = ((t_straggler / t_server).round() as usize).max(1);
    let t1 = t0.div_ceil(tau);
    let total_time = t1 as f64 * t_straggler;
    let reference = t0 as f64 * t_server;
    let relative_gap = if reference == 0.0 { 0.0 } else { (total_time - reference).abs() / reference };
    Ok(StragglerIdentity { tau, t1, total_time, reference, relative_gap })
}

/// Everything a run needs that is fixed before the first round.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: SplitModel,
    pub train: Dataset,
    pub test: Dataset,
    pub plan: PartitionPlan,
    pub rates: LearningRates,
    pub delays: DelayModel,
    pub initial: GlobalState,
}

fn invalid(path: &str, message: String) -> SimError {
    SimError::Config(ConfigError::Invalid(vec![ConfigIssue { path: path.into(), message }]))
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, SimError> {
    let d = &cfg.data;
    Ok(match d.source {
        DataSource::Blobs => data::make_blobs(d.classes, d.dim, d.samples_per_class, d.spread, cfg.data_seed())?,
        DataSource::Csv => data::load_csv(std::path::Path::new(&d.path), &LabelColumn::Name(d.label_column.clone()), None)?,
    })
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Setup, SimError> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let widths = &cfg.model.widths;
    if widths[0] != dataset.dim() {
        return Err(invalid("model.widths", format!("input width {} does not match {} data features", widths[0], dataset.dim())));
    }
    if *widths.last().expect("validated") != dataset.num_classes {
        return Err(invalid(
            "model.widths",
            format!("output width {} does not match {} data classes", widths.last().unwrap(), dataset.num_classes),
        ));
    }
    let (mut train, mut test) = data::split_holdout(&dataset, cfg.data.holdout, cfg.data_seed())?;
    if cfg.data.standardize {
        let stats = train.standardize();
        test.apply_standardization(&stats);
    }
    let plan = data::partition(&train, cfg.federation.clients, cfg.data.partition.into(), cfg.data_seed())?;

    let arch = Architecture::from_widths(widths, cfg.model.hidden_activation)?;
    let cut = match cfg.model.cut_layer {
        CutChoice::Auto => recommend_cut(&arch, cfg.protocol.tau)?,
        CutChoice::Layer(c) => c,
    };
    let full = arch.init_params(&mut stream(cfg.seed, Role::Init, 0, 0));
    let model = SplitModel::new(arch, cut)?;
    let (client, server) = model.split_params(&full)?;
    let rates = cfg.rates();
    let initial = GlobalState { client, server, round: 0, eta_g: rates.eta_g };
    Ok(Setup { model, train, test, plan, rates, delays: DelayModel::from_config(cfg)?, initial })
}

/// `min(batch_size, n)` distinct rows of one client's shard, in draw order.
pub fn sample_batch(train: &Dataset, shard: &[usize], batch_size: usize, rng: &mut StreamRng) -> Batch {
    let take = batch_size.min(shard.len());
    let rows: Vec<usize> = index::sample(rng, shard.len(), take).into_iter().map(|i| shard[i]).collect();
    train.batch(&rows)
}

/// Hooks into a running experiment.
pub trait RunObserver {
    fn on_pair(&mut self, _round: usize, _client: usize, _outcome: &PairRoundOutcome) -> Result<(), SimError> {
        Ok(())
    }

    fn on_round(&mut self, _global: &GlobalState, _record: &RunRecord) -> Result<(), SimError> {
        Ok(())
    }
}

struct NoObserver;

impl RunObserver for NoObserver {}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>, SimError> {
    run_experiment_observed(cfg, &mut NoObserver)
}

pub fn run_experiment_observed(cfg: &ExperimentConfig, observer: &mut dyn RunObserver) -> Result<Vec<RunRecord>, SimError> {
    let setup = prepare(cfg)?;
    run_rounds(cfg, &setup, observer)
}

/// The global loop: select, broadcast, pair rounds, time, aggregate, evaluate.
pub fn run_rounds(cfg: &ExperimentConfig, setup: &Setup, observer: &mut dyn RunObserver) -> Result<Vec<RunRecord>, SimError> {
    let seed = cfg.seed;
    let p = &cfg.protocol;
    let mut global = setup.initial.clone();
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut clock = 0.0;

    for t in 0..cfg.rounds {
        let participants = aggregation::select_participants(
            cfg.federation.clients,
            cfg.federation.participation,
            &mut stream(seed, Role::Selection, 0, t as u64),
        )?;
        let inits = aggregation::broadcast(&global, &participants);
        let outcomes = inits
            .into_par_iter()
            .map(|init| {
                let m = init.client_id;
                let key = |role| stream(seed, role, m as u64, t as u64);
                let batch = sample_batch(&setup.train, &setup.plan.client_indices[m], p.batch_size, &mut key(Role::Batch));
                let wrap = |source| SimError::Protocol { round: t, client: m, source };
                let client = ClientRoundState::sample(init.client, batch, setup.rates.eta_c, p.lambda, t as u64, &mut key(Role::ClientDirection))
                    .map_err(wrap)?;
                let server = ServerRoundState::new(init.server, setup.rates.eta_s, p.tau, p.lambda, p.num_perturbations).map_err(wrap)?;
                let outcome = protocol::run_pair_round(&setup.model, client, server, &mut key(Role::ServerDirection)).map_err(wrap)?;
                Ok((m, outcome))
            })
            .collect::<Result<Vec<_>, SimError>>()?;

        let timing = draw_round_timing(&setup.delays, &participants, p.tau, &mut stream(seed, Role::Delay, 0, t as u64))?;
        clock += timing.round_wall_clock;

        let mut updates = Vec::with_capacity(outcomes.len());
        let mut loss_sum = 0.0;
        let (mut up_m, mut up_s, mut down_s) = (0, 0, 0);
        for (m, outcome) in &outcomes {
            observer.on_pair(t, *m, outcome)?;
            loss_sum += outcome.train_loss;
            up_m += outcome.stats.uplink_matrices;
            up_s += outcome.stats.uplink_scalars;
            down_s += outcome.stats.downlink_scalars;
        }
        for (m, outcome) in outcomes {
            updates.push(ParticipantUpdate { client_id: m, client: outcome.client_params, server: outcome.server_params });
        }
        global = aggregation::aggregate(&global, &updates)?;

        let evaluate = (t + 1) % cfg.eval_interval == 0 || t + 1 == cfg.rounds;
        let eval_accuracy = if evaluate {
            Some(setup.model.accuracy(&global.client, &global.server, &setup.test.features, &setup.test.labels)?)
        } else {
            None
        };
        let record = RunRecord {
            round: t,
            comm_rounds: t + 1,
            simulated_time: clock,
            round_time: timing.round_wall_clock,
            straggler_time: timing.straggler_time,
            server_busy_time: timing.server_busy_time,
            participants: participants.len(),
            train_loss: loss_sum / participants.len() as f64,
            eval_accuracy,
            uplink_matrices: up_m,
            uplink_scalars: up_s,
            downlink_scalars: down_s,
        };
        observer.on_round(&global, &record)?;
        records.push(record);
    }
    Ok(records)
}

/// `(client, server)` parameters after one round.
pub type ParamPair = (Vec<f64>, Vec<f64>);

/// Plain split training of one client against one server, without any
/// federation: the same streams as a single-client run, written out step by
/// step. Returns `(client, server)` parameters after every round.
pub fn single_pair_training(cfg: &ExperimentConfig, setup: &Setup) -> Result<Vec<ParamPair>, SimError> {
    let seed = cfg.seed;
    let p = &cfg.protocol;
    let net = &setup.model;
    let shard = &setup.plan.client_indices[0];
    let mut client_params = setup.initial.client.clone();
    let mut server_params = setup.initial.server.clone();
    let mut trace = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let wrap = |source| SimError::Protocol { round: t, client: 0, source };
        let batch = sample_batch(&setup.train, shard, p.batch_size, &mut stream(seed, Role::Batch, 0, t as u64));
        let mut client = ClientRoundState::sample(
            client_params,
            batch,
            setup.rates.eta_c,
            p.lambda,
            t as u64,
            &mut stream(seed, Role::ClientDirection, 0, t as u64),
        )
        .map_err(wrap)?;
        let up: UpLink = protocol::client_emit_embeddings(net, &client).map_err(wrap)?;

        let mut server = ServerRoundState::new(server_params, setup.rates.eta_s, p.tau, p.lambda, p.num_perturbations).map_err(wrap)?;
        let mut server_rng = stream(seed, Role::ServerDirection, 0, t as u64);
        protocol::server_unbalanced_update(net, &mut server, &up.h, &up.labels, &mut server_rng).map_err(wrap)?;
        let down: DownLink = protocol::server_emit_delta(net, server.params(), &up).map_err(wrap)?;
        protocol::client_apply_update(&mut client, &down).map_err(wrap)?;

        client_params = client.into_params();
        server_params = server.into_params();
        trace.push((client_params.clone(), server_params.clone()));
    }
    Ok(trace)
}
