//! Synchronous online training session.
//!
//! Every online scheme runs through this loop; they differ only in the
//! initial model, the freeze mask and how many clients share a group. One
//! round: each client (groups in id order, clients in id order) plays one
//! rollout per local step, updates its own model, and submits; then every
//! group aggregates and each client personalizes against its group model.
//! Pending group changes take effect after the round closes.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{poll, ClientCondition, GroupChange};
use crate::env::EnvConfig;
use crate::federation::{
    personalize, AggregationMode, ClientId, Coordinator, GroupModel, PersonalizationMix, Submission, TranscriptEvent,
    TranscriptMode, UpdateMessage,
};
use crate::net::{FreezeMask, Gradients, ModelParams, TrainHyper};
use crate::rollout::{random_start, ActionMode, Episode};
use crate::trace::{GroupId, Trace};
use crate::transfer::train_step;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub clients_per_group: usize,
    pub mix: PersonalizationMix,
    /// Server step size; the client learning rate when unset.
    pub server_lr: Option<f64>,
    pub mode: AggregationMode,
    /// Local rollout-and-update passes per round.
    pub local_rollouts: usize,
    pub transcript: TranscriptSetting,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients_per_group: 4,
            mix: PersonalizationMix::default(),
            server_lr: None,
            mode: AggregationMode::Gradient,
            local_rollouts: 1,
            transcript: TranscriptSetting::Digests,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptSetting {
    Off,
    #[default]
    Digests,
    Full,
}

impl From<TranscriptSetting> for TranscriptMode {
    fn from(s: TranscriptSetting) -> Self {
        match s {
            TranscriptSetting::Off => TranscriptMode::Off,
            TranscriptSetting::Digests => TranscriptMode::Digests,
            TranscriptSetting::Full => TranscriptMode::Full,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientSpec<'a> {
    pub id: ClientId,
    pub seed: u64,
    pub group: GroupId,
    /// Traces this client streams over, cycled by epoch.
    pub traces: Vec<&'a Trace>,
    /// Label timeline; changes are detected by periodic polling.
    pub schedule: Option<Vec<ClientCondition>>,
}

#[derive(Debug, Clone)]
pub struct SessionSetup<'a> {
    pub env: EnvConfig,
    pub hyper: TrainHyper,
    pub learning_rate: f64,
    pub initial: ModelParams,
    pub mask: FreezeMask,
    pub federation: FederationConfig,
    pub clients: Vec<ClientSpec<'a>>,
    /// Traces a client switches to after migrating into a group.
    pub group_pools: BTreeMap<GroupId, Vec<&'a Trace>>,
    /// Groups to seed besides the clients' initial ones.
    pub extra_groups: Vec<GroupId>,
    /// False for the offline-only scheme: clients act but never learn.
    pub learn: bool,
    pub poll_period: f64,
    /// Horizon for schedule polling, seconds of session time.
    pub horizon: f64,
}

struct ClientState<'a> {
    spec: ClientSpec<'a>,
    group: GroupId,
    /// position among its group's clients, for trace rotation
    slot: usize,
    params: ModelParams,
    rng: ChaCha8Rng,
    episode: Option<Episode<'a>>,
    pool: Vec<&'a Trace>,
    changes: Vec<GroupChange>,
    next_change: usize,
    /// session seconds played
    clock: f64,
}

pub struct Session<'a> {
    env: EnvConfig,
    hyper: TrainHyper,
    learning_rate: f64,
    mask: FreezeMask,
    federation: FederationConfig,
    server_lr: f64,
    group_pools: BTreeMap<GroupId, Vec<&'a Trace>>,
    clients: Vec<ClientState<'a>>,
    coordinator: Coordinator,
    learn: bool,
    epoch: usize,
    rounds: u64,
    group_rewards: BTreeMap<GroupId, f64>,
}

impl<'a> Session<'a> {
    pub fn new(setup: SessionSetup<'a>) -> Result<Self> {
        if setup.clients.is_empty() {
            return Err(Error::Config("session needs at least one client".into()));
        }
        if setup.federation.local_rollouts == 0 {
            return Err(Error::Config("local_rollouts must be positive".into()));
        }
        let server_lr = setup.federation.server_lr.unwrap_or(setup.learning_rate);
        if !(server_lr.is_finite() && server_lr > 0.0) && setup.federation.mode == AggregationMode::Parameter {
            return Err(Error::Config("parameter averaging needs a positive server learning rate".into()));
        }
        let mut coordinator = Coordinator::new(server_lr, setup.mask.clone()).with_transcript(setup.federation.transcript.into());
        let mut groups: Vec<GroupId> = setup.clients.iter().map(|c| c.group).collect();
        groups.extend(setup.extra_groups.iter().copied());
        for c in &setup.clients {
            if let Some(s) = &c.schedule {
                groups.extend(s.iter().map(crate::discriminator::classify));
            }
        }
        groups.sort_unstable();
        groups.dedup();
        for g in &groups {
            coordinator.seed_group(*g, &setup.initial)?;
        }

        let mut per_group: BTreeMap<GroupId, usize> = BTreeMap::new();
        let mut clients = Vec::with_capacity(setup.clients.len());
        let mut sorted = setup.clients;
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        for spec in sorted {
            if spec.traces.is_empty() {
                return Err(Error::Config(format!("client {} has no traces", spec.id)));
            }
            let model = coordinator.register(spec.id.clone(), spec.group)?;
            let changes = match &spec.schedule {
                Some(s) if !s.is_empty() => poll(s, setup.poll_period, setup.horizon)?,
                _ => Vec::new(),
            };
            let slot = per_group.entry(spec.group).or_default();
            clients.push(ClientState {
                group: spec.group,
                slot: *slot,
                params: model.params,
                rng: ChaCha8Rng::seed_from_u64(spec.seed),
                episode: None,
                pool: spec.traces.clone(),
                changes,
                next_change: 0,
                clock: 0.0,
                spec,
            });
            *slot += 1;
        }

        Ok(Session {
            env: setup.env,
            hyper: setup.hyper,
            learning_rate: setup.learning_rate,
            mask: setup.mask,
            federation: setup.federation,
            server_lr,
            group_pools: setup.group_pools,
            clients,
            coordinator,
            learn: setup.learn,
            epoch: 0,
            rounds: 0,
            group_rewards: BTreeMap::new(),
        })
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coordinator
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn client_params(&self, id: &ClientId) -> Option<&ModelParams> {
        self.clients.iter().find(|c| &c.spec.id == id).map(|c| &c.params)
    }

    pub fn client_ids(&self) -> impl Iterator<Item = &ClientId> {
        self.clients.iter().map(|c| &c.spec.id)
    }

    pub fn group_models(&self) -> BTreeMap<GroupId, GroupModel> {
        self.coordinator
            .groups()
            .map(|g| (g, self.coordinator.fetch(g).expect("listed group").clone()))
            .collect()
    }

    pub fn take_transcript(&mut self) -> Vec<TranscriptEvent> {
        self.coordinator.take_transcript()
    }

    /// Starts a fresh episode for every client.
    pub fn begin_epoch(&mut self) -> Result<()> {
        let group_sizes: BTreeMap<GroupId, usize> = self
            .coordinator
            .groups()
            .map(|g| (g, self.coordinator.members(g).map(|m| m.len()).unwrap_or(0)))
            .collect();
        for c in &mut self.clients {
            let stride = group_sizes.get(&c.group).copied().unwrap_or(1).max(1);
            let trace = c.pool[(c.slot + self.epoch * stride) % c.pool.len()];
            let start = random_start(trace, &self.env, &mut c.rng);
            c.episode = Some(Episode::start(trace, &self.env, start)?);
        }
        Ok(())
    }

    pub fn epoch_done(&self) -> bool {
        self.clients.iter().all(|c| c.episode.as_ref().is_none_or(|e| e.done()))
    }

    /// One synchronous round across all groups.
    pub fn round(&mut self) -> Result<()> {
        let epoch = self.epoch;
        let n = self.hyper.rollout_len;
        let mut order: Vec<usize> = (0..self.clients.len()).collect();
        order.sort_by(|&a, &b| {
            (self.clients[a].group, &self.clients[a].spec.id).cmp(&(self.clients[b].group, &self.clients[b].spec.id))
        });

        let mut active_groups = Vec::new();
        for &i in &order {
            let c = &mut self.clients[i];
            let Some(ep) = c.episode.as_mut() else {
                continue;
            };
            if ep.done() {
                continue;
            }
            let steps_before = ep.outcomes().len();
            let global = self.coordinator.fetch(c.group)?;
            let round = global.version;
            let mut payload: Option<Gradients> = None;
            let mut passes = 0usize;
            for _ in 0..self.federation.local_rollouts {
                if ep.done() {
                    break;
                }
                let traj = ep.rollout(&c.params, n, ActionMode::Sample, &mut c.rng)?;
                if !self.learn {
                    continue;
                }
                let (next, grads) = train_step(&c.params, &traj, &self.mask, &self.hyper, self.learning_rate)
                    .map_err(|e| match e {
                        Error::Net(source) => Error::Diverged { epoch, source },
                        other => other,
                    })?;
                c.params = next;
                passes += 1;
                match payload.as_mut() {
                    None => payload = Some(grads),
                    Some(acc) => acc.add_assign(&grads)?,
                }
            }
            c.clock += (ep.outcomes().len() - steps_before) as f64 * self.env.step;
            if !self.learn {
                continue;
            }
            let mut payload = payload.expect("at least one local pass");
            match self.federation.mode {
                AggregationMode::Gradient => payload.scale(1.0 / passes as f64),
                AggregationMode::Parameter => {
                    payload = pseudo_gradient(&global.params, &c.params, self.server_lr);
                }
            }
            let msg = UpdateMessage {
                client: c.spec.id.clone(),
                group: c.group,
                round,
                gradients: payload,
            };
            match self.coordinator.submit(msg) {
                Submission::Accepted => {}
                Submission::Rejected(r) => {
                    return Err(Error::Config(format!("client {} update rejected: {r:?}", c.spec.id)));
                }
            }
            if active_groups.last() != Some(&c.group) {
                active_groups.push(c.group);
            }
        }

        if self.learn {
            for g in &active_groups {
                self.coordinator.aggregate_round(*g)?;
            }
            for c in &mut self.clients {
                if active_groups.contains(&c.group) {
                    let global = &self.coordinator.fetch(c.group)?.params;
                    c.params = personalize(&c.params, global, self.federation.mix)?;
                }
            }
        }
        self.rounds += 1;
        self.apply_group_changes()?;
        Ok(())
    }

    fn apply_group_changes(&mut self) -> Result<()> {
        for c in &mut self.clients {
            while let Some(ch) = c.changes.get(c.next_change) {
                if ch.at > c.clock {
                    break;
                }
                c.next_change += 1;
                if ch.to == c.group {
                    continue;
                }
                let target = self.coordinator.migrate(&c.spec.id, c.group, ch.to)?;
                log::debug!("client {} moves {} -> {} at {}s", c.spec.id, c.group, ch.to, c.clock);
                c.group = ch.to;
                if self.learn {
                    c.params = personalize(&c.params, &target.params, self.federation.mix)?;
                } else {
                    c.params = target.params;
                }
                if let Some(pool) = self.group_pools.get(&ch.to).filter(|p| !p.is_empty()) {
                    c.pool = pool.clone();
                } else {
                    log::warn!("no traces for group {}; client {} keeps its previous pool", ch.to, c.spec.id);
                }
            }
        }
        Ok(())
    }

    /// Per-group mean reward of the last finished epoch, keyed by each
    /// client's group at the end of that epoch.
    pub fn last_group_rewards(&self) -> &BTreeMap<GroupId, f64> {
        &self.group_rewards
    }

    /// Mean per-step reward over all clients' current episodes.
    pub fn end_epoch(&mut self) -> f64 {
        let mut by_group: BTreeMap<GroupId, (f64, usize)> = BTreeMap::new();
        let mut total = 0.0;
        let mut n = 0usize;
        for c in &mut self.clients {
            if let Some(e) = c.episode.take() {
                let r = e.mean_reward();
                let slot = by_group.entry(c.group).or_default();
                slot.0 += r;
                slot.1 += 1;
                total += r;
                n += 1;
            }
        }
        self.group_rewards = by_group.into_iter().map(|(g, (s, k))| (g, s / k as f64)).collect();
        self.epoch += 1;
        total / n.max(1) as f64
    }

    pub fn run_epoch(&mut self) -> Result<f64> {
        self.begin_epoch()?;
        while !self.epoch_done() {
            self.round()?;
        }
        Ok(self.end_epoch())
    }

    pub fn run(&mut self, epochs: usize) -> Result<Vec<f64>> {
        (0..epochs).map(|_| self.run_epoch()).collect()
    }
}

/// `(global − local) / lr`: stepping the global model by this lands on `local`.
fn pseudo_gradient(global: &ModelParams, local: &ModelParams, lr: f64) -> Gradients {
    let mut g = global.zero_grads();
    for ((dst, a), b) in g.layers.iter_mut().zip(&global.layers).zip(&local.layers) {
        dst.weights.iter_mut().zip(a.weights.iter().zip(&b.weights)).for_each(|(d, (x, y))| *d = (x - y) / lr);
        dst.bias.iter_mut().zip(a.bias.iter().zip(&b.bias)).for_each(|(d, (x, y))| *d = (x - y) / lr);
    }
    g
}
