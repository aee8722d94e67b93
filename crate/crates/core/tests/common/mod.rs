//! Helpers shared by the harness and acceptance test targets.
#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeMap;

use abrlab::env::EnvConfig;
use abrlab::federation::ClientId;
use abrlab::harness::{ClientSpec, FederationConfig, Session, SessionSetup};
use abrlab::net::{init_params, mlp_arch, FreezeMask, ModelParams, TrainHyper};
use abrlab::rollout::{random_start, ActionMode, Episode};
use abrlab::trace::{group_of, synthesize_trace, NetworkType, Trace, TraceFamily, TransportMode};
use abrlab::transfer::{make_freeze_mask, train_step};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn family_trace(id: &str, mean: f64, labels: (NetworkType, TransportMode), seed: u64) -> Trace {
    let family = TraceFamily {
        amplitude_kbps: 0.3 * mean,
        noise_std_kbps: 0.1 * mean,
        period_s: 45.0,
        ..TraceFamily::constant(mean, 300.0)
    };
    synthesize_trace(id, &family, labels, seed).unwrap()
}

pub fn pretrained_stub(env: &EnvConfig, seed: u64) -> ModelParams {
    init_params(&mlp_arch(env.state_dim(), &[64, 32]), env.ladder.len(), seed).unwrap()
}

fn setup<'a>(
    env: &EnvConfig,
    initial: ModelParams,
    mask: FreezeMask,
    clients: Vec<ClientSpec<'a>>,
    federation: FederationConfig,
) -> SessionSetup<'a> {
    let hyper = TrainHyper::default();
    SessionSetup {
        env: env.clone(),
        hyper,
        learning_rate: hyper.learning_rate,
        initial,
        mask,
        federation,
        clients,
        group_pools: BTreeMap::new(),
        extra_groups: Vec::new(),
        learn: true,
        poll_period: 30.0,
        horizon: 0.0,
    }
}

/// `k` clients share one trace and one seed; their group model is compared
/// after every round with a single learner replaying the same stream.
/// Returns the largest elementwise gap seen over `rounds` rounds.
pub fn federated_vs_centralized(k: usize, rounds: usize, seed: u64) -> f64 {
    let env = EnvConfig::default();
    let labels = (NetworkType::FourG, TransportMode::Ferry);
    let group = group_of(labels.0, labels.1);
    let trace = family_trace("shared", 2500.0, labels, seed);
    let initial = pretrained_stub(&env, seed);
    let mask = make_freeze_mask(2, 1).unwrap();
    let client_seed = seed.wrapping_mul(31).wrapping_add(7);
    let clients = (0..k)
        .map(|i| ClientSpec {
            id: ClientId(format!("c{i}")),
            seed: client_seed,
            group,
            traces: vec![&trace],
            schedule: None,
        })
        .collect();
    let mut session = Session::new(setup(&env, initial.clone(), mask.clone(), clients, FederationConfig::default())).unwrap();

    let hyper = TrainHyper::default();
    let mut central = initial;
    let mut rng = ChaCha8Rng::seed_from_u64(client_seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < rounds {
        session.begin_epoch().unwrap();
        let start = random_start(&trace, &env, &mut rng);
        let mut ep = Episode::start(&trace, &env, start).unwrap();
        while !ep.done() && done < rounds {
            let traj = ep.rollout(&central, hyper.rollout_len, ActionMode::Sample, &mut rng).unwrap();
            central = train_step(&central, &traj, &mask, &hyper, hyper.learning_rate).unwrap().0;
            session.round().unwrap();
            let global = &session.group_models()[&group].params;
            for (a, b) in global.flat().iter().zip(central.flat()) {
                worst = worst.max((a - b).abs());
            }
            done += 1;
        }
        if session.epoch_done() {
            session.end_epoch();
        } else {
            break;
        }
    }
    assert_eq!(session.rounds() as usize, rounds);
    worst
}

/// Three groups of four clients fine-tune from `pretrained` with the lowest
/// layer frozen. Returns the number of (round, model) checks that found the
/// frozen layer changed, plus the number of checks made.
pub fn frozen_layer_violations(rounds: usize, seed: u64) -> (usize, usize) {
    let env = EnvConfig::default();
    let pretrained = pretrained_stub(&env, seed);
    let mask = make_freeze_mask(2, 1).unwrap();
    let specs = [
        (NetworkType::ThreeG, 1000.0),
        (NetworkType::FourG, 6000.0),
        (NetworkType::WiFi, 15000.0),
    ];
    let traces: Vec<Trace> = specs
        .iter()
        .flat_map(|&(nt, mean)| {
            (0..4).map(move |i| family_trace(&format!("{}-{i}", nt.label()), mean, (nt, TransportMode::Car), seed + i))
        })
        .collect();
    let clients = traces
        .iter()
        .enumerate()
        .map(|(i, t)| ClientSpec {
            id: ClientId(t.id.clone()),
            seed: seed + 1000 + i as u64,
            group: t.group(),
            traces: vec![t],
            schedule: None,
        })
        .collect();
    let mut session = Session::new(setup(&env, pretrained.clone(), mask, clients, FederationConfig::default())).unwrap();
    let frozen = &pretrained.layers[0];
    let (mut bad, mut checks) = (0, 0);
    let mut check = |s: &Session| {
        for m in s.group_models().values() {
            checks += 1;
            bad += usize::from(m.params.layers[0] != *frozen);
        }
        for id in s.client_ids() {
            checks += 1;
            bad += usize::from(s.client_params(id).unwrap().layers[0] != *frozen);
        }
    };
    let mut done = 0;
    while done < rounds {
        session.begin_epoch().unwrap();
        while !session.epoch_done() {
            session.round().unwrap();
            check(&session);
            done += 1;
        }
        session.end_epoch();
    }
    // the heads must have moved, or the check proves nothing
    let moved = session.group_models().values().all(|m| m.params.layers[2] != pretrained.layers[2]);
    assert!(moved);
    (bad, checks)
}

