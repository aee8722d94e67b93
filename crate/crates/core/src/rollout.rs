//! Episode stepping shared by pretraining, online training and evaluation.

use rand::Rng;

use crate::env::{EnvConfig, StepOutcome, StreamEnv};
use crate::net::{forward, greedy_action, sample_action, ModelParams, Step, Trajectory};
use crate::trace::Trace;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// A running episode plus everything it has produced so far.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    env: StreamEnv<'a>,
    state: Vec<f64>,
    outcomes: Vec<StepOutcome>,
}

/// Random whole-second start offset that leaves room for a full episode.
pub fn random_start<R: Rng + ?Sized>(trace: &Trace, cfg: &EnvConfig, rng: &mut R) -> f64 {
    let slack = (trace.duration() - cfg.episode_seconds()).max(0.0).floor() as u64;
    trace.start() + rng.random_range(0..=slack) as f64
}

impl<'a> Episode<'a> {
    pub fn start(trace: &'a Trace, cfg: &EnvConfig, start: f64) -> Result<Self> {
        let (env, state) = StreamEnv::reset(trace, cfg.clone(), start)?;
        Ok(Episode {
            env,
            state: state.to_vec(),
            outcomes: Vec::with_capacity(cfg.episode_len),
        })
    }

    pub fn done(&self) -> bool {
        self.env.done()
    }

    pub fn outcomes(&self) -> &[StepOutcome] {
        &self.outcomes
    }

    pub fn mean_reward(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.outcomes.iter().map(|o| o.reward).sum::<f64>() / self.outcomes.len() as f64
    }

    /// Plays up to `n` steps with `params`. The trajectory bootstraps from
    /// the value of the state it stops in, since episodes end on a time
    /// limit rather than a terminal state.
    pub fn rollout<R: Rng + ?Sized>(
        &mut self,
        params: &ModelParams,
        n: usize,
        mode: ActionMode,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let mut steps = Vec::with_capacity(n);
        while steps.len() < n && !self.env.done() {
            let (probs, _) = forward(params, &self.state)?;
            let action = match mode {
                ActionMode::Sample => sample_action(&probs, rng),
                ActionMode::Greedy => greedy_action(&probs),
            };
            let (next, reward, outcome) = self.env.step(action)?;
            steps.push(Step {
                state: std::mem::replace(&mut self.state, next.to_vec()),
                action,
                reward,
            });
            self.outcomes.push(outcome);
        }
        let (_, bootstrap) = forward(params, &self.state)?;
        Ok(Trajectory { steps, bootstrap })
    }

    /// Plays the rest of the episode without learning.
    pub fn play_out<R: Rng + ?Sized>(&mut self, params: &ModelParams, mode: ActionMode, rng: &mut R) -> Result<()> {
        let remaining = self.env.config().episode_len - self.env.steps_taken();
        if remaining > 0 {
            self.rollout(params, remaining, mode, rng)?;
        }
        Ok(())
    }

    pub fn into_outcomes(self) -> Vec<StepOutcome> {
        self.outcomes
    }
}
