//! Experiment orchestration: corpus assembly, the four training schemes,
//! test-set evaluation and CSV/JSON outputs.

pub mod metrics;
pub mod session;

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{ClientCondition, DEFAULT_PERIOD_S};
use crate::env::{episode_qoe, outcomes_to_csv, EnvConfig, QoeSummary, StepOutcome};
use crate::federation::{ClientId, TranscriptEvent};
use crate::net::{init_params, mlp_arch, FreezeMask, ModelParams, TrainHyper};
use crate::rollout::{ActionMode, Episode};
use crate::trace::{
    group_of, split_corpus, synthesize_trace, CorpusSplit, GroupId, Manifest, NetworkType, Partition, Trace,
    TraceFamily, TransportMode,
};
use crate::transfer::{make_freeze_mask, offline_train, PretrainConfig, Pretrained, TransferConfig};
use crate::{Error, Result};

pub use metrics::{
    convergence_detail, convergence_epoch, efficiency_gain, median, qoe_report, qoe_report_csv, smooth,
    speedup_percent, ConvergenceRule, Normalization, QoeRow,
};
pub use session::{ClientSpec, FederationConfig, Session, SessionSetup, TranscriptSetting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Pretrained model deployed as is.
    OfflineOnly,
    /// Online training from a random initialization, one client per group.
    OnlineScratch,
    /// Online fine-tuning of the pretrained model with a frozen trunk, one
    /// client per group.
    TransferOnly,
    /// Frozen-trunk fine-tuning with several clients per group averaging
    /// their gradients every round.
    GroupedFederated,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::OfflineOnly,
        Scheme::OnlineScratch,
        Scheme::TransferOnly,
        Scheme::GroupedFederated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::OfflineOnly => "offline-only",
            Scheme::OnlineScratch => "online-scratch",
            Scheme::TransferOnly => "transfer-only",
            Scheme::GroupedFederated => "grouped-federated",
        }
    }

    pub fn needs_pretrained(self) -> bool {
        self != Scheme::OnlineScratch
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}; expected one of offline-only, online-scratch, transfer-only, grouped-federated")))
    }
}

/// SplitMix64 finalizer over `base ^ tag`, for deriving independent seeds.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_CORPUS: u64 = 1;
const TAG_SPLIT: u64 = 2;
const TAG_PRETRAIN: u64 = 3;
const TAG_SCRATCH_INIT: u64 = 4;
const TAG_CLIENT: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub name: String,
    pub network_type: NetworkType,
    pub transport_mode: TransportMode,
    pub count: usize,
    #[serde(flatten)]
    pub params: TraceFamily,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Label manifest for CSV traces; relative to the config file.
    pub manifest: Option<PathBuf>,
    #[serde(rename = "family")]
    pub families: Vec<FamilyConfig>,
}

impl CorpusConfig {
    pub fn load(&self, base: &Path, seed: u64) -> Result<Vec<Trace>> {
        let mut traces = Vec::new();
        if let Some(m) = &self.manifest {
            let path = base.join(m);
            let text = std::fs::read_to_string(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
            let manifest = Manifest::parse(&text)?;
            let dir = path.parent().unwrap_or(base);
            traces.extend(manifest.load_traces(dir)?);
        }
        traces.extend(synthesize_families(&self.families, seed)?);
        let mut seen = std::collections::BTreeSet::new();
        for t in &traces {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::Config(format!("duplicate trace id {:?}", t.id)));
            }
        }
        Ok(traces)
    }
}

/// Generates `count` traces per family with ids `<name>-<index>`.
pub fn synthesize_families(families: &[FamilyConfig], seed: u64) -> Result<Vec<Trace>> {
    let mut out = Vec::new();
    for (fi, f) in families.iter().enumerate() {
        for i in 0..f.count {
            let s = derive_seed(seed, ((fi as u64) << 32) | i as u64);
            out.push(synthesize_trace(
                format!("{}-{i:03}", f.name),
                &f.params,
                (f.network_type, f.transport_mode),
                s,
            )?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub t: f64,
    pub network_type: NetworkType,
    pub transport_mode: TransportMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub id: String,
    /// Explicit fine-tuning traces; otherwise the group's fine-tune pool.
    #[serde(default)]
    pub traces: Vec<String>,
    #[serde(default)]
    pub condition_schedule: Vec<ScheduleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![64, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            epochs: 200,
            episodes_per_epoch: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { epochs: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub period_s: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            period_s: DEFAULT_PERIOD_S,
        }
    }
}

/// Everything an experiment needs, read from one TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    /// Optional separate pretraining corpus (a shifted trace family); when
    /// present it replaces the split's pretrain partition.
    pub pretrain_corpus: Option<CorpusConfig>,
    pub env: EnvConfig,
    pub train: TrainHyper,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub transfer: TransferConfig,
    pub federation: FederationConfig,
    pub discriminator: DiscriminatorConfig,
    #[serde(rename = "client")]
    pub clients: Vec<ClientConfig>,
    pub run: RunConfig,
    pub convergence: ConvergenceRule,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.env.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            episodes_per_epoch: self.pretrain.episodes_per_epoch,
            hyper: self.train,
            hidden: self.model.hidden.clone(),
            seed: derive_seed(self.seed, TAG_PRETRAIN),
        }
    }
}

/// Loaded traces plus their partition.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub traces: Vec<Trace>,
    pub split: CorpusSplit,
    pub pretrain_traces: Option<Vec<Trace>>,
}

impl Corpus {
    pub fn load(cfg: &ExperimentConfig, base: &Path) -> Result<Corpus> {
        let traces = cfg.corpus.load(base, derive_seed(cfg.seed, TAG_CORPUS))?;
        let split = split_corpus(&traces, derive_seed(cfg.seed, TAG_SPLIT))?;
        let pretrain_traces = match &cfg.pretrain_corpus {
            Some(pc) => Some(pc.load(base, derive_seed(cfg.seed, TAG_CORPUS ^ 0xff))?),
            None => None,
        };
        Ok(Corpus {
            traces,
            split,
            pretrain_traces,
        })
    }

    pub fn with_split(mut self, split: CorpusSplit) -> Result<Corpus> {
        let ids: std::collections::BTreeSet<&str> = self.traces.iter().map(|t| t.id.as_str()).collect();
        let all = split.pretrain.iter().chain(&split.finetune).chain(&split.test);
        if let Some(missing) = all.clone().find(|id| !ids.contains(id.as_str())) {
            return Err(Error::Config(format!("split names unknown trace {missing:?}")));
        }
        if all.count() != ids.len() {
            return Err(Error::Config("split does not partition the corpus".into()));
        }
        self.split = split;
        Ok(self)
    }

    pub fn part(&self, p: Partition) -> Vec<&Trace> {
        self.split.select(&self.traces, p)
    }

    pub fn pretrain_set(&self) -> Vec<&Trace> {
        match &self.pretrain_traces {
            Some(t) => t.iter().collect(),
            None => self.part(Partition::Pretrain),
        }
    }

    fn by_group(traces: Vec<&Trace>) -> BTreeMap<GroupId, Vec<&Trace>> {
        let mut m: BTreeMap<GroupId, Vec<&Trace>> = BTreeMap::new();
        for t in traces {
            m.entry(t.group()).or_default().push(t);
        }
        m
    }
}

pub fn pretrain(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Pretrained> {
    offline_train(&corpus.pretrain_set(), &cfg.env, &cfg.pretrain_config())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceQoe {
    pub trace: String,
    pub group: GroupId,
    pub qoe: QoeSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scheme: Scheme,
    pub seed: u64,
    pub clients: usize,
    /// Mean per-step reward of each epoch, averaged over clients.
    pub rewards: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub convergence_epoch: Option<usize>,
    /// Per-group epoch rewards (mean over the group's clients).
    pub group_rewards: BTreeMap<GroupId, Vec<f64>>,
    pub group_convergence: BTreeMap<GroupId, Option<usize>>,
    /// Session seconds each client streamed before convergence.
    pub convergence_sim_s: Option<f64>,
    pub wall_clock_s: f64,
    pub test_qoe: QoeSummary,
    pub per_trace: Vec<TraceQoe>,
    /// Final model digest per group.
    pub model_digests: BTreeMap<GroupId, String>,
    #[serde(skip)]
    pub models: BTreeMap<GroupId, ModelParams>,
    #[serde(skip)]
    pub episodes: Vec<(String, Vec<StepOutcome>)>,
    #[serde(skip)]
    pub transcript: Vec<TranscriptEvent>,
    /// Digest of every client model after each epoch, for audit.
    #[serde(skip)]
    pub epoch_digests: Vec<Vec<String>>,
}

/// Client roster for a scheme: explicit `[[client]]` entries when present
/// (grouped-federated only), otherwise `k` clients per fine-tuning group.
fn build_clients<'a>(
    cfg: &ExperimentConfig,
    corpus: &'a Corpus,
    scheme: Scheme,
    k: usize,
) -> Result<(Vec<ClientSpec<'a>>, BTreeMap<GroupId, Vec<&'a Trace>>)> {
    let pools = Corpus::by_group(corpus.part(Partition::Finetune));
    if pools.is_empty() {
        return Err(Error::Config("fine-tune partition is empty".into()));
    }
    let mut clients = Vec::new();
    if scheme == Scheme::GroupedFederated && !cfg.clients.is_empty() {
        for (i, c) in cfg.clients.iter().enumerate() {
            let schedule: Vec<ClientCondition> = c
                .condition_schedule
                .iter()
                .map(|e| ClientCondition {
                    client: ClientId(c.id.clone()),
                    network_type: e.network_type,
                    transport_mode: e.transport_mode,
                    observed_at: e.t,
                })
                .collect();
            let traces: Vec<&Trace> = if c.traces.is_empty() {
                Vec::new()
            } else {
                c.traces
                    .iter()
                    .map(|id| {
                        corpus
                            .traces
                            .iter()
                            .find(|t| &t.id == id)
                            .ok_or_else(|| Error::Config(format!("client {} names unknown trace {id:?}", c.id)))
                    })
                    .collect::<Result<_>>()?
            };
            let group = match schedule.first() {
                Some(first) => group_of(first.network_type, first.transport_mode),
                None => traces
                    .first()
                    .map(|t| t.group())
                    .ok_or_else(|| Error::Config(format!("client {} has neither traces nor a schedule", c.id)))?,
            };
            let traces = if traces.is_empty() {
                pools
                    .get(&group)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("no fine-tune traces for client {} in {group}", c.id)))?
            } else {
                traces
            };
            clients.push(ClientSpec {
                id: ClientId(c.id.clone()),
                seed: derive_seed(cfg.seed, TAG_CLIENT + i as u64),
                group,
                traces,
                schedule: (!schedule.is_empty()).then_some(schedule),
            });
        }
    } else {
        let mut i = 0u64;
        for (g, pool) in &pools {
            for j in 0..k {
                clients.push(ClientSpec {
                    id: ClientId(format!("g{:02}-c{j:02}", g.index())),
                    seed: derive_seed(cfg.seed, TAG_CLIENT + i),
                    group: *g,
                    traces: pool.clone(),
                    schedule: None,
                });
                i += 1;
            }
        }
    }
    Ok((clients, pools))
}

/// Runs one scheme end to end: online session (or frozen deployment), then
/// greedy evaluation of each group's final model on the test partition.
pub fn run_scheme(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    pretrained: Option<&ModelParams>,
    scheme: Scheme,
) -> Result<RunMetrics> {
    let wall = Instant::now();
    let mut scheme = scheme;
    if scheme == Scheme::GroupedFederated && cfg.federation.clients_per_group < 2 && cfg.clients.is_empty() {
        log::warn!("grouped-federated with one client per group is transfer-only; running transfer-only");
        scheme = Scheme::TransferOnly;
    }
    let arch = mlp_arch(cfg.env.state_dim(), &cfg.model.hidden);
    let trunk = cfg.model.hidden.len();
    let initial = match scheme {
        Scheme::OnlineScratch => init_params(&arch, cfg.env.ladder.len(), derive_seed(cfg.seed, TAG_SCRATCH_INIT))?,
        _ => {
            let p = pretrained.ok_or_else(|| Error::Config(format!("{scheme} needs a pretrained checkpoint")))?;
            if p.input_dim() != cfg.env.state_dim() || p.num_actions() != cfg.env.ladder.len() || p.trunk().len() != trunk {
                return Err(Error::Config("pretrained checkpoint does not match the configured model".into()));
            }
            p.clone()
        }
    };
    let mask = match scheme {
        Scheme::OnlineScratch => FreezeMask::all_trainable(trunk + 2),
        Scheme::OfflineOnly => FreezeMask::all_frozen(trunk + 2),
        Scheme::TransferOnly | Scheme::GroupedFederated => make_freeze_mask(trunk, cfg.transfer.frozen_layers)?,
    };
    let k = if scheme == Scheme::GroupedFederated {
        cfg.federation.clients_per_group
    } else {
        1
    };
    let (clients, pools) = build_clients(cfg, corpus, scheme, k)?;
    let n_clients = clients.len();
    let learning_rate = match scheme {
        Scheme::TransferOnly | Scheme::GroupedFederated => cfg.transfer.learning_rate.unwrap_or(cfg.train.learning_rate),
        _ => cfg.train.learning_rate,
    };
    let mut federation = cfg.federation.clone();
    if scheme != Scheme::GroupedFederated {
        federation.transcript = TranscriptSetting::Off;
    }
    let setup = SessionSetup {
        env: cfg.env.clone(),
        hyper: cfg.train,
        learning_rate,
        initial,
        mask,
        federation,
        clients,
        group_pools: pools,
        extra_groups: Vec::new(),
        learn: scheme != Scheme::OfflineOnly,
        poll_period: cfg.discriminator.period_s,
        horizon: cfg.run.epochs as f64 * cfg.env.episode_seconds(),
    };
    let mut session = Session::new(setup)?;
    let mut rewards = Vec::with_capacity(cfg.run.epochs);
    let mut epoch_digests = Vec::with_capacity(cfg.run.epochs);
    let mut group_rewards: BTreeMap<GroupId, Vec<f64>> = BTreeMap::new();
    for _ in 0..cfg.run.epochs {
        rewards.push(session.run_epoch()?);
        for (g, r) in session.last_group_rewards() {
            group_rewards.entry(*g).or_default().push(*r);
        }
        let ids: Vec<ClientId> = session.client_ids().cloned().collect();
        epoch_digests.push(ids.iter().map(|id| session.client_params(id).unwrap().digest()).collect());
    }
    let models: BTreeMap<GroupId, ModelParams> = session
        .group_models()
        .into_iter()
        .map(|(g, m)| (g, m.params))
        .collect();
    let transcript = session.take_transcript();

    let (per_trace, episodes) = evaluate(&models, &corpus.part(Partition::Test), &cfg.env)?;
    let outcomes: Vec<StepOutcome> = episodes.iter().flat_map(|(_, o)| o.iter().copied()).collect();
    let test_qoe = episode_qoe(&outcomes, cfg.env.step)?;
    let detail = if rewards.len() >= cfg.convergence.window + cfg.convergence.sustain {
        Some(convergence_detail(&rewards, &cfg.convergence)?)
    } else {
        None
    };
    let convergence_epoch = detail.and_then(|d| d.epoch);
    let group_convergence = group_rewards
        .iter()
        .map(|(g, r)| {
            let e = if r.len() == rewards.len() && r.len() >= cfg.convergence.window + cfg.convergence.sustain {
                metrics::convergence_epoch(r, &cfg.convergence)?
            } else {
                None
            };
            Ok((*g, e))
        })
        .collect::<Result<_>>()?;
    Ok(RunMetrics {
        scheme,
        seed: cfg.seed,
        clients: n_clients,
        smoothed: smooth(&rewards, cfg.convergence.window),
        convergence_epoch,
        group_rewards,
        group_convergence,
        convergence_sim_s: convergence_epoch.map(|e| e as f64 * cfg.env.episode_seconds()),
        rewards,
        wall_clock_s: wall.elapsed().as_secs_f64(),
        test_qoe,
        per_trace,
        model_digests: models.iter().map(|(g, p)| (*g, p.digest())).collect(),
        models,
        episodes,
        transcript,
        epoch_digests,
    })
}

/// Greedy play of each test trace from its start, using the model of the
/// trace's group (or the lowest-numbered group model when that group was
/// never trained).
#[allow(clippy::type_complexity)]
pub fn evaluate(
    models: &BTreeMap<GroupId, ModelParams>,
    test: &[&Trace],
    env: &EnvConfig,
) -> Result<(Vec<TraceQoe>, Vec<(String, Vec<StepOutcome>)>)> {
    let fallback = models
        .values()
        .next()
        .ok_or_else(|| Error::Config("no models to evaluate".into()))?;
    if test.is_empty() {
        return Err(Error::Config("test partition is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(test.len());
    let mut episodes = Vec::with_capacity(test.len());
    for t in test {
        let params = models.get(&t.group()).unwrap_or(fallback);
        let mut ep = Episode::start(t, env, t.start())?;
        ep.play_out(params, ActionMode::Greedy, &mut rng)?;
        let outcomes = ep.into_outcomes();
        rows.push(TraceQoe {
            trace: t.id.clone(),
            group: t.group(),
            qoe: episode_qoe(&outcomes, env.step)?,
        });
        episodes.push((t.id.clone(), outcomes));
    }
    Ok((rows, episodes))
}

pub fn rewards_csv(m: &RunMetrics, window: usize) -> String {
    let mut out = String::from("epoch,mean_reward,smoothed_reward\n");
    for (i, r) in m.rewards.iter().enumerate() {
        let s = (i + 1 >= window).then(|| m.smoothed[i + 1 - window]);
        match s {
            Some(s) => writeln!(out, "{},{},{}", i + 1, r, s).unwrap(),
            None => writeln!(out, "{},{},", i + 1, r).unwrap(),
        }
    }
    out
}

pub fn qoe_csv(m: &RunMetrics) -> String {
    let mut out = String::from("trace,group,mean_bitrate_kbps,stall_rate,mean_delay_ms,mean_reward\n");
    let row = |out: &mut String, id: &str, g: &str, q: &QoeSummary| {
        writeln!(out, "{id},{g},{},{},{},{}", q.mean_bitrate, q.stall_rate, q.mean_delay, q.mean_reward).unwrap()
    };
    for t in &m.per_trace {
        row(&mut out, &t.trace, &t.group.index().to_string(), &t.qoe);
    }
    row(&mut out, "all", "", &m.test_qoe);
    out
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| Error::Io { path, source })
}

/// Writes `rewards.csv`, `qoe.csv`, per-trace test episode logs, final
/// group checkpoints, `summary.json` and, for federated runs,
/// `transcript.jsonl`.
pub fn write_run(dir: &Path, m: &RunMetrics, window: usize) -> Result<()> {
    let mk = |p: &Path| std::fs::create_dir_all(p).map_err(|source| Error::Io { path: p.to_path_buf(), source });
    mk(dir)?;
    write(dir, "rewards.csv", rewards_csv(m, window))?;
    write(dir, "qoe.csv", qoe_csv(m))?;
    let ep_dir = dir.join("episodes");
    mk(&ep_dir)?;
    for (id, outcomes) in &m.episodes {
        write(&ep_dir, &format!("{id}.csv"), outcomes_to_csv(outcomes))?;
    }
    for (g, p) in &m.models {
        write(dir, &format!("model_g{:02}.ckpt", g.index()), p.to_checkpoint())?;
    }
    if !m.transcript.is_empty() {
        let mut lines = String::new();
        for ev in &m.transcript {
            lines.push_str(&serde_json::to_string(ev).map_err(|e| Error::Config(e.to_string()))?);
            lines.push('\n');
        }
        write(dir, "transcript.jsonl", lines)?;
    }
    let summary = serde_json::to_string_pretty(m).map_err(|e| Error::Config(e.to_string()))?;
    write(dir, "summary.json", summary)
}

pub fn read_summary(dir: &Path) -> Result<RunMetrics> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConvergence {
    pub scheme: Scheme,
    pub runs: usize,
    pub converged: usize,
    /// Median over converged runs.
    pub median_epoch: Option<f64>,
    pub median_sim_s: Option<f64>,
}

/// Per-scheme median convergence over any number of runs (seeds).
pub fn convergence_table(runs: &[RunMetrics], rule: &ConvergenceRule, episode_s: f64) -> Result<Vec<SchemeConvergence>> {
    let mut by: BTreeMap<Scheme, Vec<Option<usize>>> = BTreeMap::new();
    for r in runs {
        let e = if r.rewards.len() >= rule.window + rule.sustain {
            convergence_epoch(&r.rewards, rule)?
        } else {
            None
        };
        by.entry(r.scheme).or_default().push(e);
    }
    Ok(by
        .into_iter()
        .map(|(scheme, epochs)| {
            let mut conv: Vec<f64> = epochs.iter().flatten().map(|&e| e as f64).collect();
            let med = median(&mut conv);
            SchemeConvergence {
                scheme,
                runs: epochs.len(),
                converged: conv.len(),
                median_epoch: med,
                median_sim_s: med.map(|e| e * episode_s),
            }
        })
        .collect())
}

pub fn convergence_csv(rows: &[SchemeConvergence]) -> String {
    let mut out = String::from("scheme,runs,converged,median_epoch,median_sim_s\n");
    for r in rows {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", r.scheme, r.runs, r.converged, opt(r.median_epoch), opt(r.median_sim_s)).unwrap();
    }
    out
}

/// Gain and speed-up for the standard scheme pairs present in `rows`.
pub fn efficiency_csv(rows: &[SchemeConvergence]) -> Result<String> {
    let get = |s: Scheme| rows.iter().find(|r| r.scheme == s).and_then(|r| r.median_epoch);
    let mut out = String::from("baseline,scheme,baseline_epochs,scheme_epochs,efficiency_gain,speedup_percent\n");
    for (base, new) in [
        (Scheme::OnlineScratch, Scheme::TransferOnly),
        (Scheme::TransferOnly, Scheme::GroupedFederated),
        (Scheme::OnlineScratch, Scheme::GroupedFederated),
    ] {
        if let (Some(tb), Some(tn)) = (get(base), get(new)) {
            writeln!(
                out,
                "{base},{new},{tb},{tn},{},{}",
                efficiency_gain(tb, tn)?,
                speedup_percent(tb, tn)?
            )
            .unwrap();
        }
    }
    Ok(out)
}

/// Mean test QoE per scheme over its runs, normalized by `anchor`.
pub fn qoe_table(runs: &[RunMetrics], anchor: Scheme) -> Result<Vec<QoeRow>> {
    let mut by: BTreeMap<Scheme, Vec<QoeSummary>> = BTreeMap::new();
    for r in runs {
        by.entry(r.scheme).or_default().push(r.test_qoe);
    }
    let means: Vec<(String, QoeSummary)> = by
        .into_iter()
        .map(|(s, qs)| {
            let n = qs.len() as f64;
            let sum = |f: fn(&QoeSummary) -> f64| qs.iter().map(f).sum::<f64>() / n;
            (
                s.name().to_string(),
                QoeSummary {
                    mean_bitrate: sum(|q| q.mean_bitrate),
                    stall_rate: sum(|q| q.stall_rate),
                    mean_delay: sum(|q| q.mean_delay),
                    mean_reward: sum(|q| q.mean_reward),
                },
            )
        })
        .collect();
    qoe_report(&means, anchor.name())
}

/// Writes `convergence.csv`, `efficiency.csv` and `qoe.csv` for a set of runs.
pub fn write_report(dir: &Path, runs: &[RunMetrics], rule: &ConvergenceRule, episode_s: f64, anchor: Scheme) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    let conv = convergence_table(runs, rule, episode_s)?;
    write(dir, "convergence.csv", convergence_csv(&conv))?;
    write(dir, "efficiency.csv", efficiency_csv(&conv)?)?;
    write(dir, "qoe.csv", qoe_report_csv(&qoe_table(runs, anchor)?))
}

pub fn split_toml(split: &CorpusSplit) -> Result<String> {
    toml::to_string(split).map_err(|e| Error::Config(e.to_string()))
}

pub fn parse_split(text: &str) -> Result<CorpusSplit> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}
