use abrlab::federation::{
    personalize, replay, ClientId, Coordinator, PersonalizationMix, Submission, TranscriptEvent, TranscriptMode,
    UpdateMessage,
};
use abrlab::net::{a3c_gradients, apply_update, init_params, mlp_arch, FreezeMask, Gradients, ModelParams, Step, TrainHyper, Trajectory};
use abrlab::trace::GroupId;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn g(i: u8) -> GroupId {
    GroupId::new(i).unwrap()
}

fn model(seed: u64) -> ModelParams {
    init_params(&mlp_arch(4, &[5, 3]), 3, seed).unwrap()
}

fn random_grads(like: &ModelParams, rng: &mut ChaCha8Rng) -> Gradients {
    let mut out = like.zero_grads();
    for l in &mut out.layers {
        l.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
    }
    out
}

fn msg(client: &ClientId, group: GroupId, round: u64, gradients: Gradients) -> UpdateMessage {
    UpdateMessage {
        client: client.clone(),
        group,
        round,
        gradients,
    }
}

fn clients(prefix: &str, n: usize) -> Vec<ClientId> {
    (0..n).map(|i| ClientId::from(format!("{prefix}{i}").as_str())).collect()
}

/// Runs `rounds` full rounds on group 1 with the given per-round updates.
fn drive(c: &mut Coordinator, ids: &[ClientId], updates: &[Vec<Gradients>]) {
    for round in updates {
        let version = c.fetch(g(1)).unwrap().version;
        for (id, grad) in ids.iter().zip(round) {
            assert_eq!(c.submit(msg(id, g(1), version, grad.clone())), Submission::Accepted);
        }
        c.aggregate_round(g(1)).unwrap();
    }
}

#[test]
fn updates_to_one_group_leave_the_others_bit_identical() {
    let p = model(1);
    let mut c = Coordinator::new(0.1, FreezeMask::all_trainable(p.layers.len()));
    for i in 1..=12 {
        c.seed_group(g(i), &p).unwrap();
    }
    let ids = clients("a", 3);
    for id in &ids {
        c.register(id.clone(), g(1)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let updates: Vec<Vec<Gradients>> = (0..20).map(|_| (0..3).map(|_| random_grads(&p, &mut rng)).collect()).collect();
    drive(&mut c, &ids, &updates);
    assert_eq!(c.fetch(g(1)).unwrap().version, 20);
    assert_ne!(c.fetch(g(1)).unwrap().params, p);
    for i in 2..=12 {
        let m = c.fetch(g(i)).unwrap();
        assert_eq!(m.params, p);
        assert_eq!(m.version, 0);
    }
}

#[test]
fn k_clients_on_identical_data_match_a_centralized_run() {
    let hyper = TrainHyper::default();
    for k in [2usize, 4, 8] {
        let p0 = model(k as u64);
        let mask = FreezeMask::all_trainable(p0.layers.len());
        let mut c = Coordinator::new(hyper.learning_rate, mask.clone());
        c.seed_group(g(1), &p0).unwrap();
        let ids = clients("k", k);
        for id in &ids {
            c.register(id.clone(), g(1)).unwrap();
        }
        let mut central = p0.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for round in 0..50u64 {
            let traj = Trajectory {
                steps: (0..8)
                    .map(|_| Step {
                        state: (0..4).map(|_| rng.random_range(0.0..1.0)).collect(),
                        action: rng.random_range(0..3),
                        reward: rng.random_range(-1.0..1.0),
                    })
                    .collect(),
                bootstrap: 0.0,
            };
            let global = c.fetch(g(1)).unwrap().params.clone();
            for id in &ids {
                let (grads, _) = a3c_gradients(&global, &traj, &hyper).unwrap();
                assert_eq!(c.submit(msg(id, g(1), round, grads)), Submission::Accepted);
            }
            let (grads, _) = a3c_gradients(&central, &traj, &hyper).unwrap();
            central = apply_update(&central, &grads, hyper.learning_rate, &mask).unwrap();
            let fed = &c.aggregate_round(g(1)).unwrap().params;
            for (a, b) in fed.flat().iter().zip(central.flat()) {
                assert!((a - b).abs() < 1e-12, "k = {k}, round {round}");
            }
        }
    }
}

#[test]
fn versions_never_decrease_across_mixed_operations() {
    let p = model(2);
    let mut c = Coordinator::new(0.05, FreezeMask::all_trainable(p.layers.len()));
    for i in 1..=3 {
        c.seed_group(g(i), &p).unwrap();
    }
    let ids = clients("m", 6);
    for (i, id) in ids.iter().enumerate() {
        c.register(id.clone(), g(1 + (i % 3) as u8)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut last = [0u64; 3];
    for _ in 0..300 {
        let gi = g(rng.random_range(1..=3));
        if rng.random_bool(0.2) {
            let id = &ids[rng.random_range(0..ids.len())];
            let from = c.group_of(id).unwrap();
            // only legal between rounds of the source group
            let _ = c.migrate(id, from, gi);
        } else {
            let version = c.fetch(gi).unwrap().version;
            for id in c.members(gi).unwrap() {
                let _ = c.submit(msg(&id, gi, version, random_grads(&p, &mut rng)));
            }
            if c.barrier_ready(gi) {
                c.aggregate_round(gi).unwrap();
            }
        }
        for i in 1..=3u8 {
            let v = c.fetch(g(i)).unwrap().version;
            assert!(v >= last[(i - 1) as usize]);
            last[(i - 1) as usize] = v;
        }
    }
    assert!(last.iter().all(|&v| v > 0));
}

#[test]
fn migrated_client_leaves_the_old_barrier() {
    let p = model(4);
    let mut c = Coordinator::new(0.1, FreezeMask::all_trainable(p.layers.len()));
    c.seed_group(g(5), &p).unwrap();
    c.seed_group(g(9), &p).unwrap();
    let ids = clients("x", 3);
    for id in &ids {
        c.register(id.clone(), g(5)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // advance the target group so the migrant must see its current version
    let other = ClientId::from("y");
    c.register(other.clone(), g(9)).unwrap();
    for r in 0..3 {
        c.submit(msg(&other, g(9), r, random_grads(&p, &mut rng)));
        c.aggregate_round(g(9)).unwrap();
    }
    let m = c.migrate(&ids[2], g(5), g(9)).unwrap();
    assert_eq!(m.version, 3);
    assert_eq!(m, *c.fetch(g(9)).unwrap());
    for id in &ids[..2] {
        c.submit(msg(id, g(5), 0, random_grads(&p, &mut rng)));
    }
    assert!(c.barrier_ready(g(5)));
    c.aggregate_round(g(5)).unwrap();
    assert!(!c.barrier_ready(g(9)));
}

#[test]
fn full_transcript_replays_to_the_same_models() {
    let p = model(6);
    let mask = FreezeMask {
        trainable: vec![false, true, true, true],
    };
    let mut c = Coordinator::new(0.1, mask.clone()).with_transcript(TranscriptMode::Full);
    c.seed_group(g(2), &p).unwrap();
    c.seed_group(g(7), &p).unwrap();
    let ids = clients("t", 4);
    for (i, id) in ids.iter().enumerate() {
        c.register(id.clone(), if i < 2 { g(2) } else { g(7) }).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for round in 0..10u64 {
        for grp in [g(2), g(7)] {
            for id in c.members(grp).unwrap() {
                let grads = random_grads(&p, &mut rng).masked(&mask);
                c.submit(msg(&id, grp, round, grads));
            }
            // a stale duplicate is recorded as rejected and skipped on replay
            let first = c.members(grp).unwrap()[0].clone();
            c.submit(msg(&first, grp, round, p.zero_grads()));
            c.aggregate_round(grp).unwrap();
        }
    }
    let text: String = c
        .transcript()
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect();
    let events: Vec<TranscriptEvent> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let r = replay(&events, 0.1, mask).unwrap();
    for grp in [g(2), g(7)] {
        assert_eq!(r.fetch(grp).unwrap(), c.fetch(grp).unwrap());
        // the frozen layer is never touched by aggregation
        assert_eq!(c.fetch(grp).unwrap().params.layers[0], p.layers[0]);
    }

    let mut tampered = events.clone();
    if let Some(TranscriptEvent::Aggregate { digest, .. }) =
        tampered.iter_mut().find(|e| matches!(e, TranscriptEvent::Aggregate { .. }))
    {
        *digest = "0".repeat(64);
    }
    assert!(replay(&tampered, 0.1, FreezeMask { trainable: vec![false, true, true, true] }).is_err());
}

proptest! {
    #[test]
    fn aggregating_updates_equals_aggregating_their_mean(seed in any::<u64>(), k in 1usize..6, lr in 0.001f64..1.0) {
        let p = model(seed);
        let mask = FreezeMask::all_trainable(p.layers.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads: Vec<Gradients> = (0..k).map(|_| random_grads(&p, &mut rng)).collect();
        let mean = Gradients::mean(&grads).unwrap();
        let ids = clients("l", k);
        let run = |updates: Vec<Gradients>| {
            let mut c = Coordinator::new(lr, mask.clone());
            c.seed_group(g(1), &p).unwrap();
            for id in &ids {
                c.register(id.clone(), g(1)).unwrap();
            }
            drive(&mut c, &ids, &[updates]);
            c.fetch(g(1)).unwrap().params.clone()
        };
        let a = run(grads.clone());
        let b = run(vec![mean; k]);
        for (x, y) in a.flat().iter().zip(b.flat()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn personalize_is_the_convex_blend(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
        let local = model(seed);
        let global = model(seed.wrapping_add(1));
        let mix = PersonalizationMix::new(lambda).unwrap();
        let out = personalize(&local, &global, mix).unwrap();
        for ((o, l), gl) in out.flat().iter().zip(local.flat()).zip(global.flat()) {
            let want = if l == gl { l } else { lambda * l + (1.0 - lambda) * gl };
            prop_assert_eq!(*o, want);
            prop_assert!(*o >= l.min(gl) - 1e-15 && *o <= l.max(gl) + 1e-15);
        }
        prop_assert_eq!(personalize(&local, &global, PersonalizationMix::new(1.0).unwrap()).unwrap(), local.clone());
        prop_assert_eq!(personalize(&local, &global, PersonalizationMix::new(0.0).unwrap()).unwrap(), global);
    }
}
