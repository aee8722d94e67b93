use abrlab::env::{EnvConfig, QoeWeights};
use abrlab::harness::metrics::{convergence_detail, median, smooth, ConvergenceRule};
use abrlab::net::{a3c_gradients, apply_update, forward, init_params, mlp_arch, FreezeMask, TrainHyper};
use abrlab::rollout::{ActionMode, Episode};
use abrlab::trace::{synthesize_trace, NetworkType, Trace, TraceFamily, TransportMode};
use abrlab::transfer::{fine_tune_step, make_freeze_mask, offline_train, train_from, PretrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LABELS: (NetworkType, TransportMode) = (NetworkType::FourG, TransportMode::Foot);

fn constant(kbps: f64) -> Trace {
    synthesize_trace("const", &TraceFamily::constant(kbps, 300.0), LABELS, 0).unwrap()
}

fn family(seed: u64) -> Vec<Trace> {
    let f = TraceFamily {
        amplitude_kbps: 600.0,
        noise_std_kbps: 200.0,
        period_s: 60.0,
        ..TraceFamily::constant(2200.0, 300.0)
    };
    (0..6).map(|i| synthesize_trace(format!("f{i}"), &f, LABELS, seed * 100 + i).unwrap()).collect()
}

fn cfg(epochs: usize, seed: u64) -> PretrainConfig {
    PretrainConfig {
        epochs,
        episodes_per_epoch: 2,
        hyper: TrainHyper {
            gamma: 0.9,
            entropy_coef: 0.05,
            ..TrainHyper::default()
        },
        hidden: vec![64, 32],
        seed,
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let env = EnvConfig::default();
    let t = constant(1500.0);
    let out = offline_train(&[&t], &env, &cfg(0, 42)).unwrap();
    let init = init_params(&mlp_arch(env.state_dim(), &[64, 32]), env.ladder.len(), 42).unwrap();
    assert_eq!(out.params, init);
    assert!(out.epoch_rewards.is_empty());
}

#[test]
fn pretraining_is_deterministic() {
    let env = EnvConfig::default();
    let traces = family(1);
    let refs: Vec<&Trace> = traces.iter().collect();
    let a = offline_train(&refs, &env, &cfg(5, 3)).unwrap();
    let b = offline_train(&refs, &env, &cfg(5, 3)).unwrap();
    assert_eq!(a.epoch_rewards, b.epoch_rewards);
    assert_eq!(a.params, b.params);
    let c = offline_train(&refs, &env, &cfg(5, 4)).unwrap();
    assert_ne!(a.epoch_rewards, c.epoch_rewards);
}

#[test]
fn constant_link_policy_picks_the_best_sustainable_rate() {
    // On a constant 2000 kbps link every rate up to 1850 streams without
    // queueing and earns more the higher it is; 2850 and above grow the
    // queue without bound. The best stationary choice is therefore 1850.
    let env = EnvConfig {
        weights: QoeWeights {
            switch: 0.1,
            ..QoeWeights::default()
        },
        ..EnvConfig::default()
    };
    let t = constant(2000.0);
    let best = env.ladder.best_below(2000.0);
    assert_eq!(env.ladder.rates()[best], 1850.0);
    let out = offline_train(&[&t], &env, &cfg(150, 9)).unwrap();

    let mut ep = Episode::start(&t, &env, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut hits = 0;
    let mut steps = 0;
    while !ep.done() {
        let traj = ep.rollout(&out.params, 1, ActionMode::Greedy, &mut rng).unwrap();
        hits += usize::from(traj.steps[0].action == best);
        steps += 1;
    }
    assert!(hits as f64 >= 0.9 * steps as f64, "{hits}/{steps} steps at the best rate");

    let n = out.epoch_rewards.len() / 10;
    let first: f64 = out.epoch_rewards[..n].iter().sum::<f64>() / n as f64;
    let last: f64 = out.epoch_rewards[out.epoch_rewards.len() - n..].iter().sum::<f64>() / n as f64;
    assert!(last >= first, "first {first}, last {last}");
}

#[test]
fn frozen_layer_survives_long_fine_tuning_bit_for_bit() {
    let env = EnvConfig::default();
    let traces = family(2);
    let pre = init_params(&mlp_arch(env.state_dim(), &[64, 32]), env.ladder.len(), 8).unwrap();
    let mask = make_freeze_mask(2, 1).unwrap();
    let hyper = TrainHyper::default();
    let mut params = pre.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut steps = 0;
    for t in traces.iter().cycle() {
        let mut ep = Episode::start(t, &env, 0.0).unwrap();
        while !ep.done() && steps < 120 {
            let traj = ep.rollout(&params, hyper.rollout_len, ActionMode::Sample, &mut rng).unwrap();
            params = fine_tune_step(&params, &traj, &mask, &hyper).unwrap();
            steps += 1;
            assert_eq!(params.layers[0], pre.layers[0]);
        }
        if steps >= 120 {
            break;
        }
    }
    assert_ne!(params.layers[1], pre.layers[1]);
}

#[test]
fn all_trainable_fine_tune_is_a_plain_update() {
    let env = EnvConfig::default();
    let t = family(3).remove(0);
    let p = init_params(&mlp_arch(env.state_dim(), &[64, 32]), env.ladder.len(), 5).unwrap();
    let hyper = TrainHyper {
        clip_norm: None,
        ..TrainHyper::default()
    };
    let mut ep = Episode::start(&t, &env, 0.0).unwrap();
    let traj = ep.rollout(&p, 16, ActionMode::Sample, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let all = FreezeMask::all_trainable(4);
    let (g, _) = a3c_gradients(&p, &traj, &hyper).unwrap();
    let plain = apply_update(&p, &g, hyper.learning_rate, &all).unwrap();
    assert_eq!(fine_tune_step(&p, &traj, &all, &hyper).unwrap(), plain);
    // the policy actually moved
    let s = &traj.steps[0].state;
    assert_ne!(forward(&plain, s).unwrap().0, forward(&p, s).unwrap().0);
}

/// First epoch at which the smoothed series holds `level` for `sustain`
/// epochs in a row.
fn reaches(rewards: &[f64], level: f64, rule: &ConvergenceRule) -> Option<usize> {
    let s = smooth(rewards, rule.window);
    (0..s.len())
        .find(|&i| i + rule.sustain <= s.len() && s[i..i + rule.sustain].iter().all(|&v| v >= level))
        .map(|i| i + rule.window)
}

#[test]
fn transfer_initialization_reaches_the_threshold_sooner_than_random_on_a_held_in_family() {
    // Both runs of a pair are timed against one level: the convergence
    // threshold of the randomly initialized run.
    let env = EnvConfig::default();
    let rule = ConvergenceRule::default();
    let epochs = 80;
    let (mut transfer, mut scratch) = (Vec::new(), Vec::new());
    for seed in 0..10u64 {
        let traces = family(seed + 10);
        let refs: Vec<&Trace> = traces.iter().collect();
        let (pre_set, online) = refs.split_at(4);
        let pre = offline_train(pre_set, &env, &cfg(100, seed)).unwrap().params;
        let fresh = init_params(&mlp_arch(env.state_dim(), &[64, 32]), env.ladder.len(), seed + 500).unwrap();
        let online_cfg = PretrainConfig {
            episodes_per_epoch: 1,
            seed: seed + 1000,
            ..cfg(epochs, seed)
        };
        let t = train_from(pre, online, &env, &online_cfg).unwrap().epoch_rewards;
        let s = train_from(fresh, online, &env, &online_cfg).unwrap().epoch_rewards;
        let level = convergence_detail(&s, &rule).unwrap().threshold;
        let never = (epochs + 1) as f64;
        transfer.push(reaches(&t, level, &rule).map_or(never, |e| e as f64));
        scratch.push(reaches(&s, level, &rule).map_or(never, |e| e as f64));
    }
    let (mt, ms) = (median(&mut transfer).unwrap(), median(&mut scratch).unwrap());
    assert!(mt < ms, "median epochs: transfer {mt}, random {ms}");
}
