//! Fluid-queue simulator of a real-time video session driven by a trace.
//!
//! Each step the agent picks a send bitrate from the ladder. Bits the link
//! cannot carry accumulate in a bottleneck queue; the queue adds delay, and a
//! step whose end-to-end delay exceeds the interactive deadline is stalled.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

use crate::trace::{Trace, TraceError};

/// Floor on link capacity (kbps) when converting backlog into queueing delay.
pub const MIN_CAPACITY_KBPS: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("bitrate ladder must be strictly ascending with at least 2 positive rates")]
    BadLadder,
    #[error("invalid env config: {0}")]
    BadConfig(String),
    #[error("trace {id} covers {duration} s, episode needs {needed} s from start {start}")]
    TraceTooShort {
        id: String,
        duration: f64,
        start: f64,
        needed: f64,
    },
    #[error("action {action} out of range for ladder of {len}")]
    BadAction { action: usize, len: usize },
    #[error("episode exhausted after {0} steps")]
    Exhausted(usize),
    #[error("no outcomes to summarise")]
    NoOutcomes,
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BitrateLadder(Vec<f64>);

impl BitrateLadder {
    pub fn new(rates: Vec<f64>) -> Result<Self, EnvError> {
        let ok = rates.len() >= 2
            && rates.iter().all(|r| r.is_finite() && *r > 0.0)
            && rates.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(BitrateLadder(rates))
        } else {
            Err(EnvError::BadLadder)
        }
    }

    pub fn rates(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_rate(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn min_rate(&self) -> f64 {
        self.0[0]
    }

    /// Highest rung not above `kbps`, or the lowest rung.
    pub fn best_below(&self, kbps: f64) -> usize {
        self.0.iter().rposition(|&r| r <= kbps).unwrap_or(0)
    }
}

impl Default for BitrateLadder {
    fn default() -> Self {
        BitrateLadder(vec![300.0, 750.0, 1200.0, 1850.0, 2850.0, 4300.0])
    }
}

impl TryFrom<Vec<f64>> for BitrateLadder {
    type Error = EnvError;
    fn try_from(v: Vec<f64>) -> Result<Self, EnvError> {
        BitrateLadder::new(v)
    }
}

impl From<BitrateLadder> for Vec<f64> {
    fn from(l: BitrateLadder) -> Vec<f64> {
        l.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QoeWeights {
    pub bitrate: f64,
    pub stall: f64,
    pub delay: f64,
    pub switch: f64,
}

impl Default for QoeWeights {
    fn default() -> Self {
        QoeWeights {
            bitrate: 1.0,
            stall: 1.5,
            delay: 0.5,
            switch: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// seconds
    pub step: f64,
    /// ms
    pub base_rtt: f64,
    /// ms
    pub deadline: f64,
    pub history_len: usize,
    pub weights: QoeWeights,
    pub episode_len: usize,
    pub ladder: BitrateLadder,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            step: 1.0,
            base_rtt: 50.0,
            deadline: 400.0,
            history_len: 8,
            weights: QoeWeights::default(),
            episode_len: 300,
            ladder: BitrateLadder::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::BadConfig(m.to_string()));
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step must be positive");
        }
        if !(self.base_rtt > 0.0 && self.deadline > self.base_rtt && self.deadline.is_finite()) {
            return bad("need 0 < base_rtt < deadline");
        }
        if self.history_len == 0 || self.episode_len == 0 {
            return bad("history_len and episode_len must be positive");
        }
        let w = &self.weights;
        if [w.bitrate, w.stall, w.delay, w.switch].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("qoe weights must be finite and non-negative");
        }
        BitrateLadder::new(self.ladder.0.clone()).map(|_| ())
    }

    /// Length of the observation vector: two histories plus last action,
    /// queue delay and loss rate.
    pub fn state_dim(&self) -> usize {
        2 * self.history_len + 3
    }

    pub fn episode_seconds(&self) -> f64 {
        self.episode_len as f64 * self.step
    }
}

/// Normalized observation. Every feature lies in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    /// Link bandwidth measured over each past step (the same quantity reset
    /// seeds the history with), oldest first.
    pub throughput: Vec<f64>,
    pub delay: Vec<f64>,
    pub last_action: f64,
    pub queue_delay: f64,
    pub loss: f64,
}

impl StreamState {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.throughput.len() * 2 + 3);
        v.extend_from_slice(&self.throughput);
        v.extend_from_slice(&self.delay);
        v.push(self.last_action);
        v.push(self.queue_delay);
        v.push(self.loss);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// seconds since trace start
    pub t: f64,
    /// kbps
    pub bitrate: f64,
    /// kbps
    pub capacity: f64,
    /// kbps
    pub achieved_throughput: f64,
    /// ms
    pub delay: f64,
    /// seconds
    pub stall_time: f64,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct StreamEnv<'a> {
    trace: &'a Trace,
    config: EnvConfig,
    start: f64,
    steps_taken: usize,
    /// kbit waiting at the bottleneck
    backlog: f64,
    prev_bitrate: f64,
    throughput_hist: Vec<f64>,
    delay_hist: Vec<f64>,
    queue_delay_ms: f64,
    loss: f64,
}

fn unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

impl<'a> StreamEnv<'a> {
    /// Starts an episode at `start` seconds into `trace`.
    pub fn reset(trace: &'a Trace, config: EnvConfig, start: f64) -> Result<(Self, StreamState), EnvError> {
        config.validate()?;
        let needed = config.episode_seconds();
        if !(start >= trace.start()) || start + needed > trace.start() + trace.duration() + 1e-9 {
            return Err(EnvError::TraceTooShort {
                id: trace.id.clone(),
                duration: trace.duration(),
                start,
                needed,
            });
        }
        let first = trace.sample_at(start)?;
        let tput = unit(first.bandwidth / config.ladder.max_rate());
        let delay = unit(config.base_rtt / (4.0 * config.deadline));
        let env = StreamEnv {
            trace,
            start,
            steps_taken: 0,
            backlog: 0.0,
            prev_bitrate: config.ladder.min_rate(),
            throughput_hist: vec![tput; config.history_len],
            delay_hist: vec![delay; config.history_len],
            queue_delay_ms: 0.0,
            loss: first.loss.unwrap_or(0.0),
            config,
        };
        let state = env.state();
        Ok((env, state))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn trace(&self) -> &Trace {
        self.trace
    }

    pub fn backlog(&self) -> f64 {
        self.backlog
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn done(&self) -> bool {
        self.steps_taken >= self.config.episode_len
    }

    pub fn state(&self) -> StreamState {
        let ladder = &self.config.ladder;
        StreamState {
            throughput: self.throughput_hist.clone(),
            delay: self.delay_hist.clone(),
            last_action: unit(self.prev_bitrate / ladder.max_rate()),
            queue_delay: unit(self.queue_delay_ms / (4.0 * self.config.deadline)),
            loss: unit(self.loss),
        }
    }

    pub fn step(&mut self, action: usize) -> Result<(StreamState, f64, StepOutcome), EnvError> {
        let cfg = &self.config;
        let ladder = &cfg.ladder;
        if action >= ladder.len() {
            return Err(EnvError::BadAction {
                action,
                len: ladder.len(),
            });
        }
        if self.done() {
            return Err(EnvError::Exhausted(self.steps_taken));
        }
        let t = self.start + self.steps_taken as f64 * cfg.step;
        let sample = self.trace.sample_at(t)?;
        let capacity = sample.bandwidth;
        let bitrate = ladder.rates()[action];

        let prev_backlog = self.backlog;
        let backlog = (prev_backlog + (bitrate - capacity) * cfg.step).max(0.0);
        let drained = (prev_backlog - backlog).max(0.0);
        let achieved = bitrate.min(capacity + drained / cfg.step);

        let queue_delay_ms = 1000.0 * backlog / capacity.max(MIN_CAPACITY_KBPS);
        let propagation = sample.rtt.map_or(cfg.base_rtt, |r| r.max(cfg.base_rtt));
        let delay = propagation + queue_delay_ms;
        let stall_time = if delay > cfg.deadline { cfg.step } else { 0.0 };

        let w = &cfg.weights;
        let max_rate = ladder.max_rate();
        let reward = w.bitrate * (bitrate / max_rate)
            - w.stall * (stall_time / cfg.step)
            - w.delay * (delay / cfg.deadline)
            - w.switch * (bitrate - self.prev_bitrate).abs() / max_rate;

        self.backlog = backlog;
        self.queue_delay_ms = queue_delay_ms;
        self.prev_bitrate = bitrate;
        self.loss = sample.loss.unwrap_or(0.0);
        self.throughput_hist.rotate_left(1);
        *self.throughput_hist.last_mut().unwrap() = unit(capacity / max_rate);
        self.delay_hist.rotate_left(1);
        *self.delay_hist.last_mut().unwrap() = unit(delay / (4.0 * cfg.deadline));
        self.steps_taken += 1;

        let outcome = StepOutcome {
            t,
            bitrate,
            capacity,
            achieved_throughput: achieved,
            delay,
            stall_time,
            reward,
        };
        Ok((self.state(), reward, outcome))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoeSummary {
    /// kbps
    pub mean_bitrate: f64,
    /// fraction of session time stalled
    pub stall_rate: f64,
    /// ms
    pub mean_delay: f64,
    pub mean_reward: f64,
}

pub fn episode_qoe(outcomes: &[StepOutcome], step: f64) -> Result<QoeSummary, EnvError> {
    if outcomes.is_empty() {
        return Err(EnvError::NoOutcomes);
    }
    let n = outcomes.len() as f64;
    let (mut bitrate, mut stall, mut delay, mut reward) = (0.0, 0.0, 0.0, 0.0);
    for o in outcomes {
        bitrate += o.bitrate;
        stall += o.stall_time;
        delay += o.delay;
        reward += o.reward;
    }
    Ok(QoeSummary {
        mean_bitrate: bitrate / n,
        stall_rate: stall / (n * step),
        mean_delay: delay / n,
        mean_reward: reward / n,
    })
}

pub const OUTCOME_CSV_HEADER: &str = "t,action_kbps,capacity_kbps,achieved_kbps,delay_ms,stall_s,reward";

pub fn outcomes_to_csv(outcomes: &[StepOutcome]) -> String {
    let mut out = String::from(OUTCOME_CSV_HEADER);
    out.push('\n');
    for o in outcomes {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            o.t, o.bitrate, o.capacity, o.achieved_throughput, o.delay, o.stall_time, o.reward
        )
        .unwrap();
    }
    out
}
