//! Independent loss and forward-pass oracles for gradient checks.

use abrlab::net::{a3c_gradients, init_params, mlp_arch, Activation, ModelParams, Step, TrainHyper, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain nested-loop forward pass, written without the crate's helpers.
pub fn oracle_forward(p: &ModelParams, x: &[f64]) -> (Vec<f64>, f64) {
    let n = p.layers.len();
    let mut h = x.to_vec();
    for l in &p.layers[..n - 2] {
        let mut out = vec![0.0; l.out_dim];
        for o in 0..l.out_dim {
            let mut z = l.bias[o];
            for i in 0..l.in_dim {
                z += l.weights[o * l.in_dim + i] * h[i];
            }
            out[o] = match l.activation {
                Activation::Relu => z.max(0.0),
                Activation::Identity => z,
            };
        }
        h = out;
    }
    let lin = |l: &abrlab::net::Dense| -> Vec<f64> {
        (0..l.out_dim)
            .map(|o| l.bias[o] + (0..l.in_dim).map(|i| l.weights[o * l.in_dim + i] * h[i]).sum::<f64>())
            .collect()
    };
    let logits = lin(&p.layers[n - 2]);
    let value = lin(&p.layers[n - 1])[0];
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (e.iter().map(|v| v / s).collect(), value)
}

pub fn returns(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    let mut r = vec![0.0; traj.steps.len()];
    let mut acc = traj.bootstrap;
    for t in (0..traj.steps.len()).rev() {
        acc = traj.steps[t].reward + gamma * acc;
        r[t] = acc;
    }
    r
}

/// Loss with the policy-term advantages frozen at `adv`.
pub fn surrogate(p: &ModelParams, traj: &Trajectory, h: &TrainHyper, ret: &[f64], adv: &[f64]) -> f64 {
    let mut loss = 0.0;
    for (t, s) in traj.steps.iter().enumerate() {
        let (pi, v) = oracle_forward(p, &s.state);
        let ent: f64 = -pi.iter().map(|q| q * q.ln()).sum::<f64>();
        loss += -adv[t] * pi[s.action].ln() + h.value_coef * (ret[t] - v).powi(2) - h.entropy_coef * ent;
    }
    loss
}

pub fn random_case(rng: &mut ChaCha8Rng) -> (ModelParams, Trajectory, TrainHyper) {
    let input = rng.random_range(2..7);
    let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(2..7)).collect();
    let actions = rng.random_range(2..6);
    let mut p = init_params(&mlp_arch(input, &hidden), actions, rng.random()).unwrap();
    // non-zero biases so no unit sits exactly on the ReLU kink
    for l in &mut p.layers {
        for b in &mut l.bias {
            *b = rng.random_range(-0.3..0.3);
        }
    }
    let len = rng.random_range(1..12);
    let steps = (0..len)
        .map(|_| Step {
            state: (0..input).map(|_| rng.random_range(0.0..1.0)).collect(),
            action: rng.random_range(0..actions),
            reward: rng.random_range(-2.0..1.0),
        })
        .collect();
    let traj = Trajectory {
        steps,
        bootstrap: rng.random_range(-3.0..3.0),
    };
    let hyper = TrainHyper {
        gamma: rng.random_range(0.5..1.0),
        entropy_coef: rng.random_range(0.0..0.2),
        value_coef: rng.random_range(0.1..1.0),
        ..TrainHyper::default()
    };
    (p, traj, hyper)
}

pub fn min_preactivation_gap(p: &ModelParams, traj: &Trajectory) -> f64 {
    let n = p.layers.len();
    let mut gap = f64::INFINITY;
    for s in &traj.steps {
        let mut h = s.state.clone();
        for l in &p.layers[..n - 2] {
            let z: Vec<f64> = (0..l.out_dim)
                .map(|o| l.bias[o] + (0..l.in_dim).map(|i| l.weights[o * l.in_dim + i] * h[i]).sum::<f64>())
                .collect();
            gap = z.iter().fold(gap, |g, v| g.min(v.abs()));
            h = z.iter().map(|v| v.max(0.0)).collect();
        }
    }
    gap
}

/// Maximum relative error between analytic and central-difference gradients
/// over `cases` random (network, trajectory) pairs.
pub fn max_gradient_error(cases: usize, seed: u64) -> f64 {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < cases {
        let (p, traj, hyper) = random_case(&mut rng);
        if min_preactivation_gap(&p, &traj) < 1e-3 {
            continue;
        }
        done += 1;
        let ret = returns(&traj, hyper.gamma);
        let adv: Vec<f64> = traj
            .steps
            .iter()
            .zip(&ret)
            .map(|(s, r)| r - oracle_forward(&p, &s.state).1)
            .collect();
        let (g, _) = a3c_gradients(&p, &traj, &hyper).unwrap();
        let analytic = g.flat();
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = p.clone();
            *plus.param_mut(i) += h;
            let mut minus = p.clone();
            *minus.param_mut(i) -= h;
            let fd = (surrogate(&plus, &traj, &hyper, &ret, &adv) - surrogate(&minus, &traj, &hyper, &ret, &adv)) / (2.0 * h);
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}
