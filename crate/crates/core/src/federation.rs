//! Intra-group coordinator.
//!
//! The coordinator holds one versioned global model per group. Enrolled
//! clients submit one update per round; once every member of a group has
//! submitted, `aggregate_round` averages the updates, takes one descent step
//! on the group model and bumps its version. Different groups never share
//! state. Every message can be recorded to a transcript for audit and replay.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{apply_update, FreezeMask, Gradients, LayerGrad, ModelParams, NetError};
use crate::trace::GroupId;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub String);

impl From<&str> for ClientId {
    fn from(s: &str) -> Self {
        ClientId(s.to_string())
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FederationError {
    #[error("group {0} is already seeded")]
    AlreadySeeded(GroupId),
    #[error("group {0} has not been seeded")]
    UnknownGroup(GroupId),
    #[error("client {0} is already registered")]
    DuplicateClient(ClientId),
    #[error("client {0} is not registered")]
    UnknownClient(ClientId),
    #[error("client {client} is in group {actual}, not {claimed}")]
    WrongGroup {
        client: ClientId,
        claimed: GroupId,
        actual: GroupId,
    },
    #[error("group {group} round {round}: waiting on {missing:?}")]
    BarrierNotSatisfied {
        group: GroupId,
        round: u64,
        missing: Vec<ClientId>,
    },
    #[error("group {0} has no enrolled clients")]
    EmptyGroup(GroupId),
    #[error("client {0} has a pending update; migrate only at a round boundary")]
    MidRound(ClientId),
    #[error("personalization weight {0} outside [0, 1]")]
    BadMix(f64),
    #[error("transcript replay diverged at event {index}: {reason}")]
    ReplayMismatch { index: usize, reason: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupModel {
    pub group: GroupId,
    pub params: ModelParams,
    /// Number of aggregations applied so far; also the current round.
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMessage {
    pub client: ClientId,
    pub group: GroupId,
    pub round: u64,
    pub gradients: Gradients,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NotEnrolled,
    WrongGroup,
    /// The client trained against an old version and must re-fetch.
    Stale,
    FutureRound,
    Duplicate,
    ShapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Submission {
    Accepted,
    Rejected(RejectReason),
}

/// Convex weight on the client's own previous model when personalizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PersonalizationMix(f64);

impl PersonalizationMix {
    pub fn new(lambda: f64) -> Result<Self, FederationError> {
        if (0.0..=1.0).contains(&lambda) {
            Ok(PersonalizationMix(lambda))
        } else {
            Err(FederationError::BadMix(lambda))
        }
    }

    pub fn lambda(self) -> f64 {
        self.0
    }
}

impl Default for PersonalizationMix {
    fn default() -> Self {
        PersonalizationMix(0.5)
    }
}

impl TryFrom<f64> for PersonalizationMix {
    type Error = FederationError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        PersonalizationMix::new(v)
    }
}

impl From<PersonalizationMix> for f64 {
    fn from(m: PersonalizationMix) -> f64 {
        m.0
    }
}

/// Elementwise `λ·local + (1−λ)·global`. Entries that already agree are
/// copied, so layers shared by both models stay bit-identical for any λ.
pub fn personalize(
    local_prev: &ModelParams,
    global: &ModelParams,
    mix: PersonalizationMix,
) -> Result<ModelParams, FederationError> {
    if !local_prev.same_shape(global) {
        return Err(NetError::ShapeMismatch.into());
    }
    let lambda = mix.lambda();
    let blend = |l: &f64, g: &f64| if l == g { *l } else { lambda * l + (1.0 - lambda) * g };
    let mut out = local_prev.clone();
    for (o, g) in out.layers.iter_mut().zip(&global.layers) {
        o.weights.iter_mut().zip(&g.weights).for_each(|(l, g)| *l = blend(l, g));
        o.bias.iter_mut().zip(&g.bias).for_each(|(l, g)| *l = blend(l, g));
    }
    Ok(out)
}

/// Gradient payload with frozen layers elided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseGradients {
    pub layers: Vec<Option<LayerGrad>>,
}

impl SparseGradients {
    pub fn from_masked(grads: &Gradients, mask: &FreezeMask) -> Self {
        SparseGradients {
            layers: grads
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| mask.is_trainable(i).then(|| l.clone()))
                .collect(),
        }
    }

    pub fn densify(&self, like: &ModelParams) -> Gradients {
        let mut g = like.zero_grads();
        for (dst, src) in g.layers.iter_mut().zip(&self.layers) {
            if let Some(src) = src {
                *dst = src.clone();
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptEvent {
    Seed {
        group: GroupId,
        digest: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params: Option<ModelParams>,
    },
    Register {
        client: ClientId,
        group: GroupId,
        version: u64,
    },
    Submit {
        client: ClientId,
        group: GroupId,
        round: u64,
        accepted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<RejectReason>,
        digest: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        payload: Option<SparseGradients>,
    },
    Aggregate {
        group: GroupId,
        version: u64,
        clients: usize,
        digest: String,
    },
    Migrate {
        client: ClientId,
        from: GroupId,
        to: GroupId,
        version: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Mean of client gradients, then one server step.
    #[default]
    Gradient,
    /// Mean of client parameters. Clients send `(global − local) / η_server`
    /// so the server step lands exactly on the parameter mean.
    Parameter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TranscriptMode {
    #[default]
    Off,
    /// Events with digests only.
    Digests,
    /// Events with full payloads; enough for [`replay`].
    Full,
}

#[derive(Debug, Clone)]
struct GroupState {
    model: GroupModel,
    members: BTreeSet<ClientId>,
    pending: BTreeMap<ClientId, Gradients>,
}

#[derive(Debug, Clone)]
pub struct Coordinator {
    groups: BTreeMap<GroupId, GroupState>,
    membership: BTreeMap<ClientId, GroupId>,
    server_lr: f64,
    mask: FreezeMask,
    transcript_mode: TranscriptMode,
    transcript: Vec<TranscriptEvent>,
}

impl Coordinator {
    pub fn new(server_lr: f64, mask: FreezeMask) -> Self {
        Coordinator {
            groups: BTreeMap::new(),
            membership: BTreeMap::new(),
            server_lr,
            mask,
            transcript_mode: TranscriptMode::Off,
            transcript: Vec::new(),
        }
    }

    pub fn with_transcript(mut self, mode: TranscriptMode) -> Self {
        self.transcript_mode = mode;
        self
    }

    pub fn mask(&self) -> &FreezeMask {
        &self.mask
    }

    pub fn transcript(&self) -> &[TranscriptEvent] {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Vec<TranscriptEvent> {
        std::mem::take(&mut self.transcript)
    }

    fn record(&mut self, e: impl FnOnce(TranscriptMode) -> TranscriptEvent) {
        if self.transcript_mode != TranscriptMode::Off {
            let ev = e(self.transcript_mode);
            self.transcript.push(ev);
        }
    }

    pub fn seed_group(&mut self, group: GroupId, pretrained: &ModelParams) -> Result<&GroupModel, FederationError> {
        if self.groups.contains_key(&group) {
            return Err(FederationError::AlreadySeeded(group));
        }
        if !pretrained.is_finite() {
            return Err(NetError::NonFinite("parameters").into());
        }
        self.record(|mode| TranscriptEvent::Seed {
            group,
            digest: pretrained.digest(),
            params: (mode == TranscriptMode::Full).then(|| pretrained.clone()),
        });
        self.groups.insert(
            group,
            GroupState {
                model: GroupModel {
                    group,
                    params: pretrained.clone(),
                    version: 0,
                },
                members: BTreeSet::new(),
                pending: BTreeMap::new(),
            },
        );
        Ok(&self.groups[&group].model)
    }

    pub fn fetch(&self, group: GroupId) -> Result<&GroupModel, FederationError> {
        self.groups
            .get(&group)
            .map(|g| &g.model)
            .ok_or(FederationError::UnknownGroup(group))
    }

    pub fn group_of(&self, client: &ClientId) -> Option<GroupId> {
        self.membership.get(client).copied()
    }

    pub fn members(&self, group: GroupId) -> Result<Vec<ClientId>, FederationError> {
        self.groups
            .get(&group)
            .map(|g| g.members.iter().cloned().collect())
            .ok_or(FederationError::UnknownGroup(group))
    }

    pub fn groups(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.groups.keys().copied()
    }

    /// Enrolls `client` and hands it the group's current model.
    pub fn register(&mut self, client: ClientId, group: GroupId) -> Result<GroupModel, FederationError> {
        if self.membership.contains_key(&client) {
            return Err(FederationError::DuplicateClient(client));
        }
        let state = self.groups.get_mut(&group).ok_or(FederationError::UnknownGroup(group))?;
        state.members.insert(client.clone());
        let model = state.model.clone();
        self.membership.insert(client.clone(), group);
        self.record(|_| TranscriptEvent::Register {
            client,
            group,
            version: model.version,
        });
        Ok(model)
    }

    pub fn submit(&mut self, update: UpdateMessage) -> Submission {
        let verdict = self.check_submission(&update);
        let payload_mask = self.mask.clone();
        self.record(|mode| TranscriptEvent::Submit {
            client: update.client.clone(),
            group: update.group,
            round: update.round,
            accepted: verdict.is_ok(),
            reason: verdict.err(),
            digest: update.gradients.digest(),
            payload: (mode == TranscriptMode::Full && verdict.is_ok())
                .then(|| SparseGradients::from_masked(&update.gradients, &payload_mask)),
        });
        match verdict {
            Ok(()) => {
                let state = self.groups.get_mut(&update.group).expect("checked");
                state.pending.insert(update.client, update.gradients);
                Submission::Accepted
            }
            Err(reason) => Submission::Rejected(reason),
        }
    }

    fn check_submission(&self, update: &UpdateMessage) -> Result<(), RejectReason> {
        let actual = *self.membership.get(&update.client).ok_or(RejectReason::NotEnrolled)?;
        if actual != update.group {
            return Err(RejectReason::WrongGroup);
        }
        let state = &self.groups[&actual];
        let round = state.model.version;
        if update.round < round {
            return Err(RejectReason::Stale);
        }
        if update.round > round {
            return Err(RejectReason::FutureRound);
        }
        if state.pending.contains_key(&update.client) {
            return Err(RejectReason::Duplicate);
        }
        if !update.gradients.same_shape(&state.model.params) {
            return Err(RejectReason::ShapeMismatch);
        }
        Ok(())
    }

    /// True when every member of `group` has submitted for the current round.
    pub fn barrier_ready(&self, group: GroupId) -> bool {
        self.groups
            .get(&group)
            .is_some_and(|g| !g.members.is_empty() && g.pending.len() == g.members.len())
    }

    /// Closes the current round of `group`: averages the submitted updates
    /// and applies them to the group model with the server learning rate and
    /// freeze mask.
    pub fn aggregate_round(&mut self, group: GroupId) -> Result<&GroupModel, FederationError> {
        let state = self.groups.get_mut(&group).ok_or(FederationError::UnknownGroup(group))?;
        if state.members.is_empty() {
            return Err(FederationError::EmptyGroup(group));
        }
        let missing: Vec<ClientId> = state
            .members
            .iter()
            .filter(|c| !state.pending.contains_key(*c))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(FederationError::BarrierNotSatisfied {
                group,
                round: state.model.version,
                missing,
            });
        }
        let mean = Gradients::mean(state.pending.values())?;
        let params = apply_update(&state.model.params, &mean, self.server_lr, &self.mask)?;
        let clients = state.pending.len();
        state.pending.clear();
        state.model.params = params;
        state.model.version += 1;
        let (version, digest) = (state.model.version, state.model.params.digest());
        self.record(|_| TranscriptEvent::Aggregate {
            group,
            version,
            clients,
            digest,
        });
        Ok(&self.groups[&group].model)
    }

    /// Moves `client` to `to` between rounds and returns the target group's
    /// current model. Moving to the current group is a no-op.
    pub fn migrate(&mut self, client: &ClientId, from: GroupId, to: GroupId) -> Result<GroupModel, FederationError> {
        let actual = *self
            .membership
            .get(client)
            .ok_or_else(|| FederationError::UnknownClient(client.clone()))?;
        if actual != from {
            return Err(FederationError::WrongGroup {
                client: client.clone(),
                claimed: from,
                actual,
            });
        }
        if !self.groups.contains_key(&to) {
            return Err(FederationError::UnknownGroup(to));
        }
        if from == to {
            return Ok(self.groups[&to].model.clone());
        }
        if self.groups[&from].pending.contains_key(client) {
            return Err(FederationError::MidRound(client.clone()));
        }
        self.groups.get_mut(&from).unwrap().members.remove(client);
        let target = self.groups.get_mut(&to).unwrap();
        target.members.insert(client.clone());
        let model = target.model.clone();
        self.membership.insert(client.clone(), to);
        self.record(|_| TranscriptEvent::Migrate {
            client: client.clone(),
            from,
            to,
            version: model.version,
        });
        Ok(model)
    }
}

/// Rebuilds a coordinator from a full transcript, checking every recorded
/// model digest along the way.
pub fn replay(
    events: &[TranscriptEvent],
    server_lr: f64,
    mask: FreezeMask,
) -> Result<Coordinator, FederationError> {
    let mut c = Coordinator::new(server_lr, mask.clone());
    let mismatch = |index: usize, reason: String| FederationError::ReplayMismatch { index, reason };
    for (i, ev) in events.iter().enumerate() {
        match ev {
            TranscriptEvent::Seed { group, digest, params } => {
                let p = params
                    .as_ref()
                    .ok_or_else(|| mismatch(i, "seed event has no parameters".into()))?;
                if &p.digest() != digest {
                    return Err(mismatch(i, "seed digest".into()));
                }
                c.seed_group(*group, p)?;
            }
            TranscriptEvent::Register { client, group, version } => {
                let m = c.register(client.clone(), *group)?;
                if m.version != *version {
                    return Err(mismatch(i, format!("register version {} != {version}", m.version)));
                }
            }
            TranscriptEvent::Submit {
                client,
                group,
                round,
                accepted,
                payload,
                ..
            } => {
                if !accepted {
                    continue;
                }
                let payload = payload
                    .as_ref()
                    .ok_or_else(|| mismatch(i, "submit event has no payload".into()))?;
                let like = &c.fetch(*group)?.params;
                let gradients = payload.densify(like);
                let verdict = c.submit(UpdateMessage {
                    client: client.clone(),
                    group: *group,
                    round: *round,
                    gradients,
                });
                if verdict != Submission::Accepted {
                    return Err(mismatch(i, format!("{verdict:?}")));
                }
            }
            TranscriptEvent::Aggregate { group, version, digest, .. } => {
                let m = c.aggregate_round(*group)?;
                if m.version != *version || &m.params.digest() != digest {
                    return Err(mismatch(i, format!("aggregate of {group} v{version}")));
                }
            }
            TranscriptEvent::Migrate { client, from, to, version } => {
                let m = c.migrate(client, *from, *to)?;
                if m.version != *version {
                    return Err(mismatch(i, "migrate version".into()));
                }
            }
        }
    }
    Ok(c)
}
