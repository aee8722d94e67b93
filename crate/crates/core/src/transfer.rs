//! Offline pretraining and frozen-trunk fine-tuning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::net::{a3c_gradients, apply_update, init_params, mlp_arch, FreezeMask, Gradients, ModelParams, TrainHyper, Trajectory};
use crate::rollout::{random_start, ActionMode, Episode};
use crate::trace::Trace;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub hyper: TrainHyper,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 200,
            episodes_per_epoch: 4,
            hyper: TrainHyper::default(),
            hidden: vec![64, 32],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub frozen_layers: usize,
    /// Fine-tuning rate; falls back to the training hyperparameters' rate.
    pub learning_rate: Option<f64>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            frozen_layers: 1,
            learning_rate: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: ModelParams,
    /// Mean per-step reward of each epoch.
    pub epoch_rewards: Vec<f64>,
}

/// Freezes the lowest `frozen_layers` trunk layers of a model with
/// `trunk_layers` hidden layers plus two heads. Heads stay trainable.
pub fn make_freeze_mask(trunk_layers: usize, frozen_layers: usize) -> Result<FreezeMask> {
    if frozen_layers > trunk_layers {
        return Err(Error::Config(format!(
            "cannot freeze {frozen_layers} layers: model has {trunk_layers} hidden layers and two trainable heads"
        )));
    }
    let mut mask = FreezeMask::all_trainable(trunk_layers + 2);
    mask.trainable[..frozen_layers].iter_mut().for_each(|t| *t = false);
    Ok(mask)
}

/// One local learning step: gradients, norm clipping, masked descent.
/// Returns the new parameters and the (clipped) gradients that were applied.
pub fn train_step(
    params: &ModelParams,
    traj: &Trajectory,
    mask: &FreezeMask,
    hyper: &TrainHyper,
    learning_rate: f64,
) -> Result<(ModelParams, Gradients)> {
    let (mut grads, _loss) = a3c_gradients(params, traj, hyper)?;
    if let Some(cap) = hyper.clip_norm {
        grads.clip_norm(cap);
    }
    let grads = grads.masked(mask);
    let next = apply_update(params, &grads, learning_rate, mask)?;
    Ok((next, grads))
}

/// Fine-tuning step at the hyperparameters' learning rate.
pub fn fine_tune_step(params: &ModelParams, traj: &Trajectory, mask: &FreezeMask, hyper: &TrainHyper) -> Result<ModelParams> {
    train_step(params, traj, mask, hyper, hyper.learning_rate).map(|(p, _)| p)
}

/// Single-agent training from a fresh initialization. Episodes cycle
/// round-robin through a seeded shuffle of `traces`; start offsets are drawn
/// from the same seeded stream.
pub fn offline_train(traces: &[&Trace], env: &EnvConfig, cfg: &PretrainConfig) -> Result<Pretrained> {
    if traces.is_empty() {
        return Err(Error::Config("pretraining needs at least one trace".into()));
    }
    if cfg.episodes_per_epoch == 0 {
        return Err(Error::Config("episodes_per_epoch must be positive".into()));
    }
    let arch = mlp_arch(env.state_dim(), &cfg.hidden);
    let params = init_params(&arch, env.ladder.len(), cfg.seed)?;
    train_from(params, traces, env, cfg)
}

/// Same loop as [`offline_train`], continuing from `params` with every
/// layer trainable. The epoch's episodes run side by side, one rollout each
/// in turn, so consecutive updates come from different traces.
pub fn train_from(mut params: ModelParams, traces: &[&Trace], env: &EnvConfig, cfg: &PretrainConfig) -> Result<Pretrained> {
    let mask = FreezeMask::all_trainable(params.num_layers());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0ff1_1e00);
    let mut epoch_rewards = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<&Trace> = traces.to_vec();
    order.shuffle(&mut rng);
    let mut k = 0usize;
    for epoch in 0..cfg.epochs {
        let mut episodes = Vec::with_capacity(cfg.episodes_per_epoch);
        for _ in 0..cfg.episodes_per_epoch {
            let trace = order[k % order.len()];
            k += 1;
            let start = random_start(trace, env, &mut rng);
            episodes.push(Episode::start(trace, env, start)?);
        }
        while episodes.iter().any(|e| !e.done()) {
            for ep in episodes.iter_mut().filter(|e| !e.done()) {
                let traj = ep.rollout(&params, cfg.hyper.rollout_len, ActionMode::Sample, &mut rng)?;
                params = train_step(&params, &traj, &mask, &cfg.hyper, cfg.hyper.learning_rate)
                    .map_err(|e| diverged(epoch, e))?
                    .0;
            }
        }
        let total: f64 = episodes.iter().map(|e| e.mean_reward()).sum();
        epoch_rewards.push(total / cfg.episodes_per_epoch as f64);
    }
    Ok(Pretrained { params, epoch_rewards })
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Net(source) => Error::Diverged { epoch, source },
        other => other,
    }
}

pub fn rewards_csv(epoch_rewards: &[f64]) -> String {
    let mut out = String::from("epoch,mean_reward\n");
    for (i, r) in epoch_rewards.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rules() {
        assert_eq!(make_freeze_mask(2, 0).unwrap(), FreezeMask::all_trainable(4));
        assert_eq!(make_freeze_mask(2, 1).unwrap().trainable, vec![false, true, true, true]);
        assert_eq!(make_freeze_mask(2, 2).unwrap().trainable, vec![false, false, true, true]);
        assert!(make_freeze_mask(2, 3).is_err());
        assert!(make_freeze_mask(2, 4).is_err());
    }

    #[test]
    fn zero_epochs_is_init() {
        use crate::trace::{synthesize_trace, NetworkType, TraceFamily, TransportMode};
        let env = EnvConfig {
            episode_len: 10,
            ..EnvConfig::default()
        };
        let t = synthesize_trace("a", &TraceFamily::constant(900.0, 20.0), (NetworkType::ThreeG, TransportMode::Car), 1).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            seed: 4,
            ..PretrainConfig::default()
        };
        let out = offline_train(&[&t], &env, &cfg).unwrap();
        let init = init_params(&mlp_arch(env.state_dim(), &cfg.hidden), 6, 4).unwrap();
        assert_eq!(out.params, init);
        assert!(out.epoch_rewards.is_empty());
        assert!(offline_train(&[], &env, &cfg).is_err());
    }
}
