//! Property suites runnable from the command line.
//!
//! Every check reports a measured value, a bound and a Monte-Carlo margin; it
//! passes when `measured + margin <= bound`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::config::{ExperimentConfig, GlobalRate};
use crate::aggregation::GlobalState;
use crate::metrics::RunRecord;
use crate::rng::{stream, Role};
use crate::sim::{self, DelayDistribution, DelayModel, RunObserver, SimError};
use crate::zo::{self, l2_norm, sample_direction, Direction, Quadratic, ZoError};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("unknown suite {0:?}; expected one of: lemma1, straggler, reduction")]
    UnknownSuite(String),
    #[error(transparent)]
    Zo(#[from] ZoError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Lemma1,
    Straggler,
    Reduction,
}

impl FromStr for Suite {
    type Err = VerifyError;
    fn from_str(s: &str) -> Result<Self, VerifyError> {
        match s {
            "lemma1" => Ok(Suite::Lemma1),
            "straggler" => Ok(Suite::Straggler),
            "reduction" => Ok(Suite::Reduction),
            other => Err(VerifyError::UnknownSuite(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyCheck {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
    pub pass: bool,
}

impl PropertyCheck {
    pub fn new(name: impl Into<String>, measured: f64, bound: f64, margin: f64) -> Self {
        let pass = measured.is_finite() && measured + margin <= bound;
        PropertyCheck { name: name.into(), measured, bound, margin, pass }
    }
}

impl fmt::Display for PropertyCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: measured {:.6e}, bound {:.6e}, margin {:.6e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.bound,
            self.margin
        )
    }
}

pub const DEFAULT_SEED: u64 = 2024;
pub const DEFAULT_DRAWS: usize = 100_000;
/// Standard errors allowed between a Monte-Carlo estimate and its oracle.
pub const Z_LIMIT: f64 = 6.0;

pub fn run_suite(suite: Suite) -> Result<Vec<PropertyCheck>, VerifyError> {
    match suite {
        Suite::Lemma1 => lemma1_suite(DEFAULT_SEED, DEFAULT_DRAWS),
        Suite::Straggler => straggler_suite(),
        Suite::Reduction => reduction_suite(200),
    }
}

/// Test function with a known gradient and smoothness constant.
trait TestFunction {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn smoothness(&self) -> f64;
}

impl TestFunction for Quadratic {
    fn dim(&self) -> usize {
        Quadratic::dim(self)
    }
    fn value(&self, x: &[f64]) -> f64 {
        Quadratic::value(self, x)
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        Quadratic::gradient(self, x)
    }
    fn smoothness(&self) -> f64 {
        self.smoothness_bound()
    }
}

/// `sum_i s_i log cosh(x_i - c_i)`: smooth with constant `max s_i`, not quadratic.
struct LogCosh {
    scale: Vec<f64>,
    center: Vec<f64>,
}

fn log_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl TestFunction for LogCosh {
    fn dim(&self) -> usize {
        self.scale.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.scale).zip(&self.center).map(|((xi, s), c)| s * log_cosh(xi - c)).sum()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.scale).zip(&self.center).map(|((xi, s), c)| s * (xi - c).tanh()).collect()
    }
    fn smoothness(&self) -> f64 {
        self.scale.iter().copied().fold(0.0, f64::max)
    }
}

fn uniform(rng: &mut impl rand::Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Random symmetric, diagonally dominant quadratic.
fn random_quadratic(d: usize, seed: u64) -> Quadratic {
    let mut rng = stream(seed, Role::Data, d as u64, 1);
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in i + 1..d {
            let v = uniform(&mut rng, -0.5, 0.5) / d as f64;
            a[i * d + j] = v;
            a[j * d + i] = v;
        }
        a[i * d + i] = uniform(&mut rng, 0.5, 2.0);
    }
    let b = (0..d).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    Quadratic::new(a, b).expect("symmetric by construction")
}

fn random_log_cosh(d: usize, seed: u64) -> LogCosh {
    let mut rng = stream(seed, Role::Data, d as u64, 2);
    LogCosh {
        scale: (0..d).map(|_| uniform(&mut rng, 0.5, 2.0)).collect(),
        center: (0..d).map(|_| uniform(&mut rng, -1.0, 1.0)).collect(),
    }
}

fn random_point(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, Role::Data, d as u64, 3);
    (0..d).map(|_| uniform(&mut rng, -1.0, 1.0)).collect()
}

/// Running mean and variance per coordinate (Welford).
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Moments { n: 0.0, mean: vec![0.0; d], m2: vec![0.0; d] }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1.0;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(v) {
            let delta = x - *m;
            *m += delta / self.n;
            *s += delta * (x - *m);
        }
    }

    fn std_error(&self, i: usize) -> f64 {
        (self.m2[i] / (self.n - 1.0) / self.n).sqrt()
    }
}

fn directions(d: usize, draws: usize, seed: u64, tag: u64) -> Result<Vec<Direction>, ZoError> {
    let mut rng = stream(seed, Role::ClientDirection, d as u64, tag);
    (0..draws).map(|_| sample_direction(d, &mut rng)).collect()
}

/// Largest coordinate z-score of the Monte-Carlo mean of the estimator against
/// the analytic smoothed gradient `A x + b` of a quadratic.
pub fn unbiasedness_z(d: usize, lambda: f64, draws: usize, seed: u64) -> Result<f64, ZoError> {
    let q = random_quadratic(d, seed);
    let x = random_point(d, seed);
    let oracle = zo::smoothed_gradient_oracle(&q, &x, lambda)?;
    let mut mom = Moments::new(d);
    for u in directions(d, draws, seed, 0)? {
        mom.push(&zo::zo_estimate(|p| q.value(p), &x, &u, lambda)?.gradient);
    }
    Ok((0..d).map(|i| (mom.mean[i] - oracle[i]).abs() / mom.std_error(i)).fold(0.0, f64::max))
}

/// `(estimate, standard error)` of `||E g - grad f(x)||`.
///
/// Since `E[(grad f . u) u] = grad f` exactly, the bias equals the mean of
/// `r = g - (grad f . u) u`, whose variance is far smaller than that of `g`.
fn bias_estimate(f: &dyn TestFunction, x: &[f64], lambda: f64, dirs: &[Direction]) -> Result<(f64, f64), ZoError> {
    let grad = f.gradient(x);
    let mut mom = Moments::new(f.dim());
    let mut r = vec![0.0; f.dim()];
    for u in dirs {
        let est = zo::zo_estimate(|p| f.value(p), x, u, lambda)?;
        let c = zo::dot(&grad, u.values());
        for ((ri, gi), ui) in r.iter_mut().zip(&est.gradient).zip(u.values()) {
            *ri = gi - c * ui;
        }
        mom.push(&r);
    }
    let norm = l2_norm(&mom.mean);
    // error of a norm is at most the norm of the coordinate errors
    let se = (0..f.dim()).map(|i| mom.std_error(i).powi(2)).sum::<f64>().sqrt();
    Ok((norm, se))
}

/// `(estimate, standard error)` of `E ||g||^2`.
fn second_moment(f: &dyn TestFunction, x: &[f64], lambda: f64, dirs: &[Direction]) -> Result<(f64, f64), ZoError> {
    let mut mom = Moments::new(1);
    for u in dirs {
        let est = zo::zo_estimate(|p| f.value(p), x, u, lambda)?;
        mom.push(&[zo::dot(&est.gradient, &est.gradient)]);
    }
    Ok((mom.mean[0], mom.std_error(0)))
}

pub fn lemma1_suite(seed: u64, draws: usize) -> Result<Vec<PropertyCheck>, VerifyError> {
    let mut checks = Vec::new();
    for d in [2usize, 8, 32] {
        let z = unbiasedness_z(d, 0.01, draws, seed)?;
        checks.push(PropertyCheck::new(format!("unbiased mean, quadratic d={d} (max z-score)"), z, Z_LIMIT, 0.0));
    }
    for d in [2usize, 8, 32] {
        let x = random_point(d, seed);
        let functions: [(&str, Box<dyn TestFunction>); 2] =
            [("quadratic", Box::new(random_quadratic(d, seed))), ("log-cosh", Box::new(random_log_cosh(d, seed)))];
        for (tag, (fname, f)) in functions.iter().enumerate() {
            let l = f.smoothness();
            let grad_sq = zo::dot(&f.gradient(&x), &f.gradient(&x));
            for (k, lambda) in [1e-1, 1e-2, 1e-3].into_iter().enumerate() {
                let dirs = directions(d, draws, seed, 1 + (tag * 3 + k) as u64)?;
                let df = d as f64;
                let (bias, bias_se) = bias_estimate(f.as_ref(), &x, lambda, &dirs)?;
                checks.push(PropertyCheck::new(
                    format!("bias, {fname} d={d} lambda={lambda:e}"),
                    bias,
                    0.5 * l * lambda * df.powf(1.5),
                    Z_LIMIT * bias_se,
                ));
                let (m2, m2_se) = second_moment(f.as_ref(), &x, lambda, &dirs)?;
                checks.push(PropertyCheck::new(
                    format!("second moment, {fname} d={d} lambda={lambda:e}"),
                    m2,
                    2.0 * df * grad_sq + 0.5 * l * l * lambda * lambda * df.powi(3),
                    Z_LIMIT * m2_se,
                ));
            }
        }
    }
    Ok(checks)
}

pub fn straggler_suite() -> Result<Vec<PropertyCheck>, VerifyError> {
    let mut checks = Vec::new();

    let exact = sim::straggler_identity_check(100, 8.0, 2.0)?;
    checks.push(PropertyCheck::new("identity gap, T0=100 t_straggler=8 t_server=2", exact.relative_gap, 0.0, 0.0));
    checks.push(PropertyCheck::new("identity tau, T0=100 t_straggler=8 t_server=2", (exact.tau as f64 - 4.0).abs(), 0.0, 0.0));

    let rounded = sim::straggler_identity_check(100, 7.0, 2.0)?;
    // tau = round(3.5) = 4, T1 = 25, 25 * 7 = 175 against 100 * 2 = 200
    checks.push(PropertyCheck::new(
        "rounding gap error, T0=100 t_straggler=7 t_server=2",
        (rounded.relative_gap - 25.0 / 200.0).abs(),
        1e-15,
        0.0,
    ));

    // The same identity, measured on the simulated clock with fixed delays.
    let mut means = vec![2.0; 10];
    means[0] = 8.0;
    let fixed = DelayModel::new(DelayDistribution::Fixed, means.clone(), 2.0)?;
    let participants: Vec<usize> = (0..10).collect();
    let mut clock = 0.0;
    for t in 0..exact.t1 {
        clock += sim::draw_round_timing(&fixed, &participants, exact.tau, &mut stream(0, Role::Delay, 0, t as u64))?.round_wall_clock;
    }
    checks.push(PropertyCheck::new("simulated fixed-delay time minus T0*t_server", (clock - 200.0).abs(), 0.0, 0.0));

    let mut means = vec![1.0; 10];
    means[0] = 4.0;
    let expo = DelayModel::new(DelayDistribution::Exponential, means, 1.0)?;
    let base = sim::mean_idle_time(&expo, &participants, 1, 5000, DEFAULT_SEED)?;
    let matched = sim::mean_idle_time(&expo, &participants, 4, 5000, DEFAULT_SEED)?;
    checks.push(PropertyCheck::new("idle time per round, matched tau=4 (bound: tau=1)", matched, base, 0.0));
    Ok(checks)
}

struct ParamTrace(Vec<(Vec<f64>, Vec<f64>)>);

impl RunObserver for ParamTrace {
    fn on_round(&mut self, global: &GlobalState, _record: &RunRecord) -> Result<(), SimError> {
        self.0.push((global.client.clone(), global.server.clone()));
        Ok(())
    }
}

/// One client, full participation and a unit global step: the federated run
/// must reproduce plain split training bit for bit.
pub fn reduction_config(rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { rounds, seed: DEFAULT_SEED, ..ExperimentConfig::default() };
    cfg.federation.clients = 1;
    cfg.federation.participation = 1.0;
    cfg.rates.eta_g = GlobalRate::Value(1.0);
    cfg.data.samples_per_class = 40;
    cfg.eval_interval = rounds.max(1);
    cfg
}

/// Number of rounds whose parameters differ in any bit, and the round count.
pub fn reduction_mismatches(cfg: &ExperimentConfig) -> Result<(usize, usize), VerifyError> {
    let setup = sim::prepare(cfg)?;
    let plain = sim::single_pair_training(cfg, &setup)?;
    let mut fed = ParamTrace(Vec::new());
    sim::run_rounds(cfg, &setup, &mut fed)?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mismatches = plain
        .iter()
        .zip(&fed.0)
        .filter(|((pc, ps), (fc, fs))| bits(pc) != bits(fc) || bits(ps) != bits(fs))
        .count()
        + plain.len().abs_diff(fed.0.len());
    Ok((mismatches, plain.len()))
}

pub fn reduction_suite(rounds: usize) -> Result<Vec<PropertyCheck>, VerifyError> {
    let (mismatches, n) = reduction_mismatches(&reduction_config(rounds))?;
    Ok(vec![PropertyCheck::new(format!("rounds differing from plain split training ({n} rounds)"), mismatches as f64, 0.0, 0.0)])
}
