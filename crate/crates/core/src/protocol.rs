//! One client / split-server pair executing a single global round.
//!
//! 1. The client computes the cut-layer embedding `h` and the two perturbed
//!    embeddings `h+`, `h-` (client parameters shifted by `+-lambda u_c`) and
//!    sends all three, plus the labels, up.
//! 2. The server runs `tau` zeroth-order steps on its own half, every step
//!    reading the same unperturbed `h`.
//! 3. With the updated server half it evaluates the loss on `h+` and `h-` and
//!    sends the scalar difference `delta_c` down.
//! 4. The client moves along its own direction:
//!    `x_c <- x_c - eta_c * delta_c / (2 lambda) * u_c`.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use thiserror::Error;

use crate::matrix::Matrix;
use crate::model::{Batch, ModelError, SplitNetwork};
use crate::zo::{self, estimate_coefficient, sample_direction, Direction, ZoError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Zo(#[from] ZoError),
    #[error("server step {step}: {source}")]
    ServerStep { step: usize, source: ZoError },
    #[error("non-finite server loss on the {0} embedding")]
    NonFiniteDelta(&'static str),
    #[error("downlink for round nonce {found} does not match the client's nonce {expected}")]
    StaleDirection { expected: u64, found: u64 },
    #[error("unbalanced update ratio must be at least 1")]
    InvalidTau,
    #[error("invalid {name}: {value}")]
    InvalidScalar { name: &'static str, value: f64 },
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
}

/// Client -> server message: three embeddings of the same minibatch and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UpLink {
    pub nonce: u64,
    pub h: Matrix,
    pub h_plus: Matrix,
    pub h_minus: Matrix,
    pub labels: Vec<usize>,
}

impl UpLink {
    pub const EMBEDDING_MATRICES: usize = 3;

    /// Number of floating-point values carried by the three embeddings.
    pub fn embedding_scalars(&self) -> usize {
        self.h.as_slice().len() + self.h_plus.as_slice().len() + self.h_minus.as_slice().len()
    }
}

/// Server -> client message: a single scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownLink {
    pub nonce: u64,
    pub delta: f64,
}

impl DownLink {
    pub const SCALARS: usize = 1;
}

fn check_rate(name: &'static str, value: f64) -> Result<(), ProtocolError> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ProtocolError::InvalidScalar { name, value })
    }
}

/// Client-side state for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundState {
    params: Vec<f64>,
    direction: Direction,
    batch: Batch,
    eta_c: f64,
    lambda: f64,
    nonce: u64,
}

impl ClientRoundState {
    pub fn new(
        params: Vec<f64>,
        direction: Direction,
        batch: Batch,
        eta_c: f64,
        lambda: f64,
        nonce: u64,
    ) -> Result<Self, ProtocolError> {
        if direction.dim() != params.len() {
            return Err(ProtocolError::DimensionMismatch {
                what: "client direction",
                expected: params.len(),
                found: direction.dim(),
            });
        }
        check_rate("client learning rate", eta_c)?;
        check_rate("smoothing scale", lambda)?;
        Ok(ClientRoundState { params, direction, batch, eta_c, lambda, nonce })
    }

    /// Samples a fresh direction for this round from `rng`.
    pub fn sample<R: Rng + ?Sized>(
        params: Vec<f64>,
        batch: Batch,
        eta_c: f64,
        lambda: f64,
        nonce: u64,
        rng: &mut R,
    ) -> Result<Self, ProtocolError> {
        let direction = sample_direction(params.len(), rng)?;
        ClientRoundState::new(params, direction, batch, eta_c, lambda, nonce)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn direction(&self) -> &Direction {
        &self.direction
    }

    pub fn batch(&self) -> &Batch {
        &self.batch
    }

    pub fn nonce(&self) -> u64 {
        self.nonce
    }
}

/// Computes `{h, h+, h-}` for the client's minibatch. Client parameters are
/// not modified.
pub fn client_emit_embeddings<N: SplitNetwork + ?Sized>(net: &N, state: &ClientRoundState) -> Result<UpLink, ProtocolError> {
    let inputs = &state.batch.inputs;
    let h = net.forward_client(&state.params, inputs)?;
    let mut shifted = state.params.clone();
    zo::perturb_into(&mut shifted, &state.params, &state.direction, state.lambda);
    let h_plus = net.forward_client(&shifted, inputs)?;
    zo::perturb_into(&mut shifted, &state.params, &state.direction, -state.lambda);
    let h_minus = net.forward_client(&shifted, inputs)?;
    Ok(UpLink { nonce: state.nonce, h, h_plus, h_minus, labels: state.batch.labels.clone() })
}

/// Applies the downlink scalar along the round's direction.
pub fn client_apply_update(state: &mut ClientRoundState, down: &DownLink) -> Result<(), ProtocolError> {
    if down.nonce != state.nonce {
        return Err(ProtocolError::StaleDirection { expected: state.nonce, found: down.nonce });
    }
    if !down.delta.is_finite() {
        return Err(ProtocolError::InvalidScalar { name: "client delta", value: down.delta });
    }
    if state.lambda <= 0.0 {
        return Err(ZoError::InvalidLambda(state.lambda).into());
    }
    let coef = state.eta_c * estimate_coefficient(down.delta, state.lambda);
    for (x, u) in state.params.iter_mut().zip(state.direction.values()) {
        *x -= coef * u;
    }
    Ok(())
}

/// Split-server state for one client's half during one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerRoundState {
    params: Vec<f64>,
    eta_s: f64,
    tau: usize,
    lambda: f64,
    num_perturbations: usize,
    step: usize,
}

impl ServerRoundState {
    pub fn new(params: Vec<f64>, eta_s: f64, tau: usize, lambda: f64, num_perturbations: usize) -> Result<Self, ProtocolError> {
        if tau == 0 {
            return Err(ProtocolError::InvalidTau);
        }
        check_rate("server learning rate", eta_s)?;
        zo::SmoothingConfig::new(lambda, num_perturbations)?;
        Ok(ServerRoundState { params, eta_s, tau, lambda, num_perturbations, step: 0 })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Steps applied so far this round.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn tau(&self) -> usize {
        self.tau
    }
}

/// What the server observed during its `tau` local steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerUpdateReport {
    /// `F(x_s + lambda u_s, h) - F(x_s - lambda u_s, h)` for each step.
    pub step_deltas: Vec<f64>,
    /// Mean of the two perturbed losses at the first step, an estimate of the
    /// training loss at the start of the round.
    pub initial_loss: f64,
}

/// Runs the `tau` unbalanced server steps, all on the stale embedding `h`.
pub fn server_unbalanced_update<N, R>(
    net: &N,
    state: &mut ServerRoundState,
    h: &Matrix,
    labels: &[usize],
    rng: &mut R,
) -> Result<ServerUpdateReport, ProtocolError>
where
    N: SplitNetwork + ?Sized,
    R: Rng + ?Sized,
{
    if state.params.len() != net.server_dim() {
        return Err(ProtocolError::DimensionMismatch {
            what: "server parameters",
            expected: net.server_dim(),
            found: state.params.len(),
        });
    }
    let mut step_deltas = Vec::with_capacity(state.tau);
    let mut initial_loss = f64::NAN;
    while state.step < state.tau {
        let step = state.step;
        let directions = (0..state.num_perturbations)
            .map(|_| sample_direction(state.params.len(), rng))
            .collect::<Result<Vec<_>, _>>()?;
        let est = zo::zo_estimate_averaged(
            |p| net.server_loss(p, h, labels).unwrap_or(f64::NAN),
            &state.params,
            &directions,
            state.lambda,
        )
        .map_err(|source| ProtocolError::ServerStep { step, source })?;
        if step == 0 {
            initial_loss = 0.5 * (est.loss_plus + est.loss_minus);
        }
        for (x, g) in state.params.iter_mut().zip(&est.gradient) {
            *x -= state.eta_s * g;
        }
        step_deltas.push(est.delta);
        state.step += 1;
    }
    Ok(ServerUpdateReport { step_deltas, initial_loss })
}

/// `delta_c = F(x_s, h+) - F(x_s, h-)` with the server half after its `tau` steps.
pub fn server_emit_delta<N: SplitNetwork + ?Sized>(net: &N, server_params: &[f64], up: &UpLink) -> Result<DownLink, ProtocolError> {
    let plus = net
        .server_loss(server_params, &up.h_plus, &up.labels)
        .map_err(|e| nonfinite_or(e, "h+"))?;
    let minus = net
        .server_loss(server_params, &up.h_minus, &up.labels)
        .map_err(|e| nonfinite_or(e, "h-"))?;
    Ok(DownLink { nonce: up.nonce, delta: plus - minus })
}

fn nonfinite_or(e: ModelError, which: &'static str) -> ProtocolError {
    match e {
        ModelError::NonFinite(_) => ProtocolError::NonFiniteDelta(which),
        other => ProtocolError::Model(other),
    }
}

/// Per pair-round traffic and work, as performed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairRoundStats {
    pub uplink_matrices: usize,
    pub uplink_scalars: usize,
    pub downlink_scalars: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRoundOutcome {
    pub client_params: Vec<f64>,
    pub server_params: Vec<f64>,
    pub train_loss: f64,
    pub stats: PairRoundStats,
    pub uplink: UpLink,
    pub downlink: DownLink,
}

/// Executes one full pair round: embeddings up, `tau` server steps, scalar
/// down, client update.
pub fn run_pair_round<N, R>(
    net: &N,
    mut client: ClientRoundState,
    mut server: ServerRoundState,
    server_rng: &mut R,
) -> Result<PairRoundOutcome, ProtocolError>
where
    N: SplitNetwork + ?Sized,
    R: Rng + ?Sized,
{
    let uplink = client_emit_embeddings(net, &client)?;
    let report = server_unbalanced_update(net, &mut server, &uplink.h, &uplink.labels, server_rng)?;
    let downlink = server_emit_delta(net, server.params(), &uplink)?;
    client_apply_update(&mut client, &downlink)?;
    let stats = PairRoundStats {
        uplink_matrices: UpLink::EMBEDDING_MATRICES,
        uplink_scalars: uplink.embedding_scalars(),
        downlink_scalars: DownLink::SCALARS,
    };
    Ok(PairRoundOutcome {
        client_params: client.into_params(),
        server_params: server.into_params(),
        train_loss: report.initial_loss,
        stats,
        uplink,
        downlink,
    })
}

/// Wraps a network and counts every forward pass and loss evaluation.
#[derive(Debug)]
pub struct CountingNetwork<'a, N: ?Sized> {
    inner: &'a N,
    client_forwards: AtomicUsize,
    server_losses: AtomicUsize,
}

impl<'a, N: SplitNetwork + ?Sized> CountingNetwork<'a, N> {
    pub fn new(inner: &'a N) -> Self {
        CountingNetwork { inner, client_forwards: AtomicUsize::new(0), server_losses: AtomicUsize::new(0) }
    }

    pub fn client_forwards(&self) -> usize {
        self.client_forwards.load(Ordering::Relaxed)
    }

    pub fn server_losses(&self) -> usize {
        self.server_losses.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.client_forwards.store(0, Ordering::Relaxed);
        self.server_losses.store(0, Ordering::Relaxed);
    }
}

impl<N: SplitNetwork + ?Sized> SplitNetwork for CountingNetwork<'_, N> {
    fn client_dim(&self) -> usize {
        self.inner.client_dim()
    }

    fn server_dim(&self) -> usize {
        self.inner.server_dim()
    }

    fn forward_client(&self, params: &[f64], inputs: &Matrix) -> Result<Matrix, ModelError> {
        self.client_forwards.fetch_add(1, Ordering::Relaxed);
        self.inner.forward_client(params, inputs)
    }

    fn server_loss(&self, params: &[f64], embedding: &Matrix, labels: &[usize]) -> Result<f64, ModelError> {
        self.server_losses.fetch_add(1, Ordering::Relaxed);
        self.inner.server_loss(params, embedding, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Architecture, DenseLayer, SplitModel};
    use crate::rng::{stream, Role};
    use std::sync::Mutex;

    fn small_model() -> SplitModel {
        SplitModel::new(Architecture::from_widths(&[4, 6, 5, 3], Activation::Tanh).unwrap(), 1).unwrap()
    }

    fn batch() -> Batch {
        let inputs = Matrix::from_rows(&[vec![0.5, -1.0, 0.2, 0.0], vec![1.5, 0.3, -0.7, 1.0], vec![0.0, 0.1, 0.2, 0.3]])
            .unwrap();
        Batch::new(inputs, vec![0, 2, 1], 3).unwrap()
    }

    fn params(model: &SplitModel, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let full = model.architecture().init_params(&mut stream(seed, Role::Init, 0, 0));
        model.split_params(&full).unwrap()
    }

    /// Server half is a quadratic in its own parameters; the embedding only
    /// enters as a constant offset so steps can be replayed by hand.
    struct QuadraticServer {
        client_dim: usize,
        server_dim: usize,
        seen: Mutex<Vec<Matrix>>,
    }

    impl SplitNetwork for QuadraticServer {
        fn client_dim(&self) -> usize {
            self.client_dim
        }
        fn server_dim(&self) -> usize {
            self.server_dim
        }
        fn forward_client(&self, params: &[f64], inputs: &Matrix) -> Result<Matrix, ModelError> {
            let s: f64 = params.iter().sum();
            let data = inputs.as_slice().iter().map(|v| v + s).collect();
            Ok(Matrix::from_vec(inputs.rows(), inputs.cols(), data).unwrap())
        }
        fn server_loss(&self, params: &[f64], embedding: &Matrix, _labels: &[usize]) -> Result<f64, ModelError> {
            self.seen.lock().unwrap().push(embedding.clone());
            let offset: f64 = embedding.as_slice().iter().sum();
            Ok(0.5 * params.iter().map(|p| p * p).sum::<f64>() + offset)
        }
    }

    #[test]
    fn zero_lambda_gives_identical_embeddings() {
        let model = small_model();
        let (c, _) = params(&model, 1);
        let mut r = stream(1, Role::ClientDirection, 0, 0);
        let state = ClientRoundState::sample(c, batch(), 0.1, 0.0, 0, &mut r).unwrap();
        let up = client_emit_embeddings(&model, &state).unwrap();
        assert_eq!(up.h, up.h_plus);
        assert_eq!(up.h, up.h_minus);
    }

    #[test]
    fn perturbation_moves_one_feature_of_identity_client() {
        let arch = Architecture::new(vec![
            DenseLayer { in_dim: 2, out_dim: 2, activation: Activation::Identity },
            DenseLayer { in_dim: 2, out_dim: 2, activation: Activation::Identity },
        ])
        .unwrap();
        let model = SplitModel::new(arch, 1).unwrap();
        let client = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let d_c = client.len();
        // direction along the first output's bias
        let mut u = vec![0.0; d_c];
        u[4] = (d_c as f64).sqrt();
        let b = Batch::new(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap(), vec![0], 2).unwrap();
        let state = ClientRoundState::new(client, Direction::from_values(u).unwrap(), b, 0.1, 0.1, 0).unwrap();
        let up = client_emit_embeddings(&model, &state).unwrap();
        let shift = 0.1 * (d_c as f64).sqrt();
        assert!((up.h_plus.get(0, 0) - (up.h.get(0, 0) + shift)).abs() < 1e-15);
        assert!((up.h_minus.get(0, 0) - (up.h.get(0, 0) - shift)).abs() < 1e-15);
        assert_eq!(up.h_plus.get(0, 1), up.h.get(0, 1));
        assert_eq!(up.h_minus.get(0, 1), up.h.get(0, 1));
    }

    #[test]
    fn emission_is_deterministic_and_leaves_params() {
        let model = small_model();
        let (c, _) = params(&model, 2);
        let a = ClientRoundState::sample(c.clone(), batch(), 0.1, 0.01, 3, &mut stream(9, Role::ClientDirection, 1, 2)).unwrap();
        let b = ClientRoundState::sample(c.clone(), batch(), 0.1, 0.01, 3, &mut stream(9, Role::ClientDirection, 1, 2)).unwrap();
        assert_eq!(client_emit_embeddings(&model, &a).unwrap(), client_emit_embeddings(&model, &b).unwrap());
        assert_eq!(a.params(), &c[..]);
    }

    #[test]
    fn single_step_equals_one_zo_sgd_step() {
        let model = small_model();
        let (c, s) = params(&model, 3);
        let h = model.forward_client(&c, &batch().inputs).unwrap();
        let labels = batch().labels;
        let mut state = ServerRoundState::new(s.clone(), 0.05, 1, 0.01, 1).unwrap();
        server_unbalanced_update(&model, &mut state, &h, &labels, &mut stream(4, Role::ServerDirection, 0, 0)).unwrap();

        let u = sample_direction(s.len(), &mut stream(4, Role::ServerDirection, 0, 0)).unwrap();
        let est = zo::zo_estimate(|p| model.server_loss(p, &h, &labels).unwrap(), &s, &u, 0.01).unwrap();
        let expected: Vec<f64> = s.iter().zip(&est.gradient).map(|(x, g)| x - 0.05 * g).collect();
        assert_eq!(state.params(), &expected[..]);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn zero_server_rate_leaves_params() {
        let model = small_model();
        let (c, s) = params(&model, 3);
        let h = model.forward_client(&c, &batch().inputs).unwrap();
        let mut state = ServerRoundState::new(s.clone(), 0.0, 5, 0.01, 1).unwrap();
        server_unbalanced_update(&model, &mut state, &h, &batch().labels, &mut stream(0, Role::ServerDirection, 0, 0)).unwrap();
        assert_eq!(state.params(), &s[..]);
        assert_eq!(state.step(), 5);
    }

    #[test]
    fn three_steps_match_scripted_replay() {
        let net = QuadraticServer { client_dim: 2, server_dim: 4, seen: Mutex::new(Vec::new()) };
        let h = Matrix::from_rows(&[vec![0.5, 1.0]]).unwrap();
        let x0 = vec![1.0, -2.0, 0.5, 3.0];
        let (eta, lambda) = (0.1, 0.01);
        let mut state = ServerRoundState::new(x0.clone(), eta, 3, lambda, 1).unwrap();
        server_unbalanced_update(&net, &mut state, &h, &[0], &mut stream(5, Role::ServerDirection, 0, 0)).unwrap();

        // replay: for f = 1/2|x|^2 + c the estimate is (u.x) u
        let mut r = stream(5, Role::ServerDirection, 0, 0);
        let mut x = x0;
        for _ in 0..3 {
            let u = sample_direction(4, &mut r).unwrap();
            let ux: f64 = u.values().iter().zip(&x).map(|(a, b)| a * b).sum();
            for (xi, ui) in x.iter_mut().zip(u.values()) {
                *xi -= eta * ux * ui;
            }
        }
        for (a, b) in state.params().iter().zip(&x) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn all_server_steps_read_the_same_embedding() {
        let net = QuadraticServer { client_dim: 2, server_dim: 3, seen: Mutex::new(Vec::new()) };
        let h = Matrix::from_rows(&[vec![0.25, -1.0]]).unwrap();
        let mut state = ServerRoundState::new(vec![0.1, 0.2, 0.3], 0.1, 6, 0.01, 1).unwrap();
        server_unbalanced_update(&net, &mut state, &h, &[0], &mut stream(1, Role::ServerDirection, 0, 0)).unwrap();
        let seen = net.seen.lock().unwrap();
        assert_eq!(seen.len(), 12);
        assert!(seen.iter().all(|e| *e == h));
    }

    #[test]
    fn non_finite_server_loss_reports_step() {
        struct Exploding;
        impl SplitNetwork for Exploding {
            fn client_dim(&self) -> usize {
                1
            }
            fn server_dim(&self) -> usize {
                1
            }
            fn forward_client(&self, _: &[f64], inputs: &Matrix) -> Result<Matrix, ModelError> {
                Ok(inputs.clone())
            }
            fn server_loss(&self, p: &[f64], _: &Matrix, _: &[usize]) -> Result<f64, ModelError> {
                // finite until the parameter has moved far enough
                Ok(if p[0].abs() > 1.5 { f64::INFINITY } else { p[0] })
            }
        }
        let h = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let mut state = ServerRoundState::new(vec![0.0], 1.0, 10, 0.1, 1).unwrap();
        let err = server_unbalanced_update(&Exploding, &mut state, &h, &[0], &mut stream(0, Role::ServerDirection, 0, 0))
            .unwrap_err();
        // loss = p gives a unit gradient, so each step moves p by -1; step 2 evaluates near -2
        assert!(matches!(err, ProtocolError::ServerStep { step: 2, .. }), "{err:?}");
    }

    #[test]
    fn delta_examples() {
        let model = small_model();
        let (c, s) = params(&model, 6);
        let mut r = stream(6, Role::ClientDirection, 0, 0);
        let state = ClientRoundState::sample(c, batch(), 0.1, 0.05, 7, &mut r).unwrap();
        let up = client_emit_embeddings(&model, &state).unwrap();

        let same = UpLink { h_minus: up.h_plus.clone(), ..up.clone() };
        assert_eq!(server_emit_delta(&model, &s, &same).unwrap().delta, 0.0);

        let swapped = UpLink { h_plus: up.h_minus.clone(), h_minus: up.h_plus.clone(), ..up.clone() };
        let d = server_emit_delta(&model, &s, &up).unwrap();
        assert_eq!(server_emit_delta(&model, &s, &swapped).unwrap().delta, -d.delta);

        let direct = model.server_loss(&s, &up.h_plus, &up.labels).unwrap() - model.server_loss(&s, &up.h_minus, &up.labels).unwrap();
        assert_eq!(d.delta, direct);
        assert_eq!(d.nonce, 7);
    }

    #[test]
    fn client_update_examples() {
        let model = small_model();
        let (c, _) = params(&model, 7);
        let lambda = 0.01;
        let fresh = || ClientRoundState::sample(c.clone(), batch(), 2.0 * lambda, lambda, 1, &mut stream(1, Role::ClientDirection, 0, 0)).unwrap();

        let mut s = fresh();
        client_apply_update(&mut s, &DownLink { nonce: 1, delta: 0.0 }).unwrap();
        assert_eq!(s.params(), &c[..]);

        let mut s = fresh();
        client_apply_update(&mut s, &DownLink { nonce: 1, delta: 1.0 }).unwrap();
        for ((new, old), u) in s.params().iter().zip(&c).zip(s.direction().values()) {
            assert!((old - new - u).abs() < 1e-15);
        }

        let mut s = fresh();
        let err = client_apply_update(&mut s, &DownLink { nonce: 2, delta: 1.0 }).unwrap_err();
        assert_eq!(err, ProtocolError::StaleDirection { expected: 1, found: 2 });
        assert_eq!(s.params(), &c[..]);
    }

    #[test]
    fn client_update_is_rank_one() {
        let model = small_model();
        let (c, _) = params(&model, 8);
        let mut s = ClientRoundState::sample(c.clone(), batch(), 0.3, 0.02, 0, &mut stream(2, Role::ClientDirection, 0, 0)).unwrap();
        client_apply_update(&mut s, &DownLink { nonce: 0, delta: -0.37 }).unwrap();
        let coef = -0.3 * (-0.37 / (2.0 * 0.02));
        for ((new, old), u) in s.params().iter().zip(&c).zip(s.direction().values()) {
            assert!(((new - old) - coef * u).abs() < 1e-14);
        }
    }

    #[test]
    fn pair_round_budget_and_traffic() {
        let model = small_model();
        for tau in [1usize, 2, 4, 8] {
            let counting = CountingNetwork::new(&model);
            let (c, s) = params(&model, 9);
            let client = ClientRoundState::sample(c, batch(), 0.05, 0.01, 0, &mut stream(0, Role::ClientDirection, 0, 0)).unwrap();
            let server = ServerRoundState::new(s, 0.01, tau, 0.01, 1).unwrap();
            let out = run_pair_round(&counting, client, server, &mut stream(0, Role::ServerDirection, 0, 0)).unwrap();
            assert_eq!(counting.client_forwards(), 3);
            assert_eq!(counting.server_losses(), 2 * tau + 2);
            assert_eq!(out.stats.uplink_matrices, 3);
            assert_eq!(out.stats.downlink_scalars, 1);
            assert_eq!(out.stats.uplink_scalars, 3 * 3 * model.cut_width());
        }
    }

    #[test]
    fn invalid_server_state_rejected() {
        assert_eq!(ServerRoundState::new(vec![0.0], 0.1, 0, 0.01, 1), Err(ProtocolError::InvalidTau));
        assert!(ServerRoundState::new(vec![0.0], -0.1, 1, 0.01, 1).is_err());
        assert!(ServerRoundState::new(vec![0.0], 0.1, 1, 0.0, 1).is_err());
    }
}
