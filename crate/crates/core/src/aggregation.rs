//! Dual FedAvg over both model halves with partial participation.
//!
//! The fed server moves the global client half and the split server moves the
//! global server half by the same rule:
//!
//! ```text
//! x^{t+1} = x^t + eta_g * sum_m w_m (x_m^{t+1} - x^t)
//! ```
//!
//! summed over the round's participants in ascending client id.

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("no participants to aggregate")]
    NoParticipants,
    #[error("client {client}: {side} half has {found} parameters, expected {expected}")]
    DimensionMismatch { client: usize, side: &'static str, expected: usize, found: usize },
    #[error("participant set contains client {0} twice")]
    DuplicateClient(usize),
    #[error("federation has no clients")]
    NoClients,
    #[error("participation fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("weights must be non-negative and sum to 1")]
    InvalidWeights,
}

/// Global model at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub client: Vec<f64>,
    pub server: Vec<f64>,
    pub round: usize,
    pub eta_g: f64,
}

/// Both halves returned by one participant after its pair round.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantUpdate {
    pub client_id: usize,
    pub client: Vec<f64>,
    pub server: Vec<f64>,
}

/// Starting point handed to one participating pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInit {
    pub client_id: usize,
    pub client: Vec<f64>,
    pub server: Vec<f64>,
}

/// `n` equal weights whose left-to-right sum is exactly 1.
///
/// The last weight absorbs the rounding of the others.
pub fn equal_weights(n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let w = 1.0 / n as f64;
    let mut weights = vec![w; n];
    let head: f64 = weights[..n - 1].iter().sum();
    weights[n - 1] = 1.0 - head;
    debug_assert_eq!(weights.iter().sum::<f64>(), 1.0);
    weights
}

/// Uniform sample of `ceil(fraction * clients)` distinct ids, returned sorted.
pub fn select_participants<R: Rng + ?Sized>(clients: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>, AggregationError> {
    if clients == 0 {
        return Err(AggregationError::NoClients);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AggregationError::InvalidFraction(fraction));
    }
    let count = participant_count(clients, fraction);
    if count == clients {
        return Ok((0..clients).collect());
    }
    let mut ids = index::sample(rng, clients, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `ceil(fraction * clients)`, ignoring representation error in the product
/// (0.3 * 10 selects 3, not 4).
pub fn participant_count(clients: usize, fraction: f64) -> usize {
    let raw = fraction * clients as f64;
    let nearest = raw.round();
    let count = if (raw - nearest).abs() <= 1e-9 * raw.max(1.0) { nearest } else { raw.ceil() };
    (count as usize).clamp(1, clients)
}

/// Fresh copies of the global halves for every participant. Non-participants
/// get nothing: they hold no round state between selections.
pub fn broadcast(global: &GlobalState, participants: &[usize]) -> Vec<PairInit> {
    participants
        .iter()
        .map(|&client_id| PairInit { client_id, client: global.client.clone(), server: global.server.clone() })
        .collect()
}

/// Equal-weight aggregation over the participants.
pub fn aggregate(global: &GlobalState, participants: &[ParticipantUpdate]) -> Result<GlobalState, AggregationError> {
    let weights = equal_weights(participants.len());
    aggregate_weighted(global, participants, &weights)
}

/// Aggregation with explicit per-participant weights (same order as `participants`).
pub fn aggregate_weighted(
    global: &GlobalState,
    participants: &[ParticipantUpdate],
    weights: &[f64],
) -> Result<GlobalState, AggregationError> {
    if participants.is_empty() {
        return Err(AggregationError::NoParticipants);
    }
    if weights.len() != participants.len() || weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(AggregationError::InvalidWeights);
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(AggregationError::InvalidWeights);
    }
    for p in participants {
        for (side, expected, found) in [
            ("client", global.client.len(), p.client.len()),
            ("server", global.server.len(), p.server.len()),
        ] {
            if expected != found {
                return Err(AggregationError::DimensionMismatch { client: p.client_id, side, expected, found });
            }
        }
    }
    let mut order: Vec<usize> = (0..participants.len()).collect();
    order.sort_by_key(|&i| participants[i].client_id);
    if let Some(w) = order.windows(2).find(|w| participants[w[0]].client_id == participants[w[1]].client_id) {
        return Err(AggregationError::DuplicateClient(participants[w[0]].client_id));
    }

    let next_round = global.round + 1;
    // A single participant taking a unit step is the global model: assign it
    // outright so the update is exact rather than x + (y - x).
    if participants.len() == 1 && global.eta_g == 1.0 && weights[0] == 1.0 {
        let p = &participants[0];
        return Ok(GlobalState { client: p.client.clone(), server: p.server.clone(), round: next_round, eta_g: global.eta_g });
    }

    let step = |base: &[f64], pick: &dyn Fn(&ParticipantUpdate) -> &[f64]| -> Vec<f64> {
        let mut acc = vec![0.0; base.len()];
        for &i in &order {
            let w = weights[i];
            for ((a, &x), &b) in acc.iter_mut().zip(pick(&participants[i])).zip(base) {
                *a += w * (x - b);
            }
        }
        base.iter().zip(&acc).map(|(b, a)| b + global.eta_g * a).collect()
    };
    Ok(GlobalState {
        client: step(&global.client, &|p| &p.client),
        server: step(&global.server, &|p| &p.server),
        round: next_round,
        eta_g: global.eta_g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Role};
    use proptest::prelude::*;

    fn global(client: Vec<f64>, server: Vec<f64>, eta_g: f64) -> GlobalState {
        GlobalState { client, server, round: 0, eta_g }
    }

    fn update(id: usize, client: Vec<f64>, server: Vec<f64>) -> ParticipantUpdate {
        ParticipantUpdate { client_id: id, client, server }
    }

    #[test]
    fn unchanged_participants_leave_global() {
        let g = global(vec![0.1, -0.7, 3.3], vec![1.0 / 3.0, 2.5], 0.3);
        let ps = vec![update(0, g.client.clone(), g.server.clone()), update(4, g.client.clone(), g.server.clone())];
        let next = aggregate(&g, &ps).unwrap();
        assert_eq!(next.client, g.client);
        assert_eq!(next.server, g.server);
        assert_eq!(next.round, 1);
    }

    #[test]
    fn single_unit_step_adopts_participant() {
        let g = global(vec![1.0, 2.0], vec![3.0], 1.0);
        let ps = vec![update(2, vec![0.1 + 0.2, -5.0], vec![1e-30])];
        let next = aggregate(&g, &ps).unwrap();
        assert_eq!(next.client, ps[0].client);
        assert_eq!(next.server, ps[0].server);
    }

    #[test]
    fn weighted_delta_arithmetic() {
        let g = global(vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0], 0.3);
        let d1 = [0.5, -1.0, 2.0];
        let d2 = [1.5, 0.0, -4.0];
        let ps = vec![
            update(0, g.client.iter().zip(&d1).map(|(x, d)| x + d).collect(), d1.to_vec()),
            update(1, g.client.iter().zip(&d2).map(|(x, d)| x + d).collect(), d2.to_vec()),
        ];
        let next = aggregate(&g, &ps).unwrap();
        // 0.3 * (d1 + d2) / 2 = [0.3, -0.15, -0.3]
        let expected = [0.3, -0.15, -0.3];
        for (i, e) in expected.iter().enumerate() {
            assert!((next.client[i] - g.client[i] - e).abs() < 1e-12);
            assert!((next.server[i] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_errors() {
        let g = global(vec![0.0; 2], vec![0.0; 3], 0.3);
        assert_eq!(aggregate(&g, &[]), Err(AggregationError::NoParticipants));
        let bad = vec![update(1, vec![0.0; 2], vec![0.0; 2])];
        assert!(matches!(aggregate(&g, &bad), Err(AggregationError::DimensionMismatch { client: 1, side: "server", .. })));
        let dup = vec![update(1, vec![0.0; 2], vec![0.0; 3]), update(1, vec![0.0; 2], vec![0.0; 3])];
        assert_eq!(aggregate(&g, &dup), Err(AggregationError::DuplicateClient(1)));
    }

    #[test]
    fn equal_weights_sum_to_one_exactly() {
        for n in 1..=257 {
            let w = equal_weights(n);
            assert_eq!(w.len(), n);
            assert_eq!(w.iter().sum::<f64>(), 1.0, "n = {n}");
            assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
        }
    }

    #[test]
    fn selection_examples() {
        let mut r = stream(0, Role::Selection, 0, 0);
        assert_eq!(select_participants(7, 1.0, &mut r).unwrap(), (0..7).collect::<Vec<_>>());
        let ids = select_participants(10, 0.5, &mut stream(1, Role::Selection, 0, 3)).unwrap();
        assert_eq!(ids.len(), 5);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert!(ids.iter().all(|&i| i < 10));
        assert_eq!(ids, select_participants(10, 0.5, &mut stream(1, Role::Selection, 0, 3)).unwrap());
        assert_eq!(select_participants(0, 0.5, &mut r), Err(AggregationError::NoClients));
        assert_eq!(select_participants(3, 0.0, &mut r), Err(AggregationError::InvalidFraction(0.0)));
        assert_eq!(participant_count(10, 0.3), 3);
        assert_eq!(participant_count(10, 0.31), 4);
        assert_eq!(participant_count(3, 0.01), 1);
    }

    #[test]
    fn broadcast_copies_are_isolated() {
        let g = global(vec![1.0, 2.0], vec![3.0], 0.3);
        let mut inits = broadcast(&g, &[1, 4, 6]);
        assert_eq!(inits.len(), 3);
        assert!(inits.iter().all(|p| p.client == g.client && p.server == g.server));
        inits[0].client[0] = 99.0;
        assert_eq!(inits[1].client, g.client);
        assert_eq!(g.client[0], 1.0);
        assert_eq!(inits.iter().map(|p| p.client_id).collect::<Vec<_>>(), vec![1, 4, 6]);
    }

    proptest! {
        #[test]
        fn global_delta_is_linear_in_local_deltas(
            deltas in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..6),
            scale in -3.0f64..3.0,
            eta_g in 0.05f64..2.0,
        ) {
            let g = global(vec![0.5, -0.25, 1.0, 2.0], vec![0.0, 1.0, -1.0, 0.5], eta_g);
            let build = |c: f64| -> Vec<ParticipantUpdate> {
                deltas.iter().enumerate().map(|(i, d)| update(
                    i,
                    g.client.iter().zip(d).map(|(x, di)| x + c * di).collect(),
                    g.server.iter().zip(d).map(|(x, di)| x + c * di).collect(),
                )).collect()
            };
            let base = aggregate(&g, &build(1.0)).unwrap();
            let scaled = aggregate(&g, &build(scale)).unwrap();
            for i in 0..4 {
                let d1 = base.client[i] - g.client[i];
                let dc = scaled.client[i] - g.client[i];
                prop_assert!((dc - scale * d1).abs() <= 1e-12 * (1.0 + d1.abs() * scale.abs()) + 1e-12);
            }
        }
    }
}
