//! Bandwidth traces: parsing, replay, labelling, corpus splitting and
//! synthetic generation.
//!
//! A trace is a piecewise-constant bandwidth schedule sampled at strictly
//! increasing timestamps. Labels (network type and transport mode) are kept
//! outside the CSV so that third-party logs can be dropped in unchanged; see
//! [`Manifest`].

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("empty trace file")]
    Empty,
    #[error("line {line}: malformed row {row:?}")]
    MalformedRow { line: usize, row: String },
    #[error("line {line}: negative {field}")]
    Negative { line: usize, field: &'static str },
    #[error("line {line}: loss rate {value} outside [0, 1]")]
    LossOutOfRange { line: usize, value: f64 },
    #[error("line {line}: timestamp {t} does not increase")]
    NonMonotone { line: usize, t: f64 },
    #[error("trace needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("query time {t} outside trace span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("corpus of {0} traces is too small to split (need at least 5)")]
    CorpusTooSmall(usize),
    #[error("invalid generator parameters: {0}")]
    InvalidGenerator(String),
    #[error("unknown {kind} label {label:?}")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkType {
    #[serde(rename = "3g")]
    ThreeG,
    #[serde(rename = "4g")]
    FourG,
    WiFi,
}

impl NetworkType {
    pub const ALL: [NetworkType; 3] = [NetworkType::ThreeG, NetworkType::FourG, NetworkType::WiFi];

    pub fn label(self) -> &'static str {
        match self {
            NetworkType::ThreeG => "3g",
            NetworkType::FourG => "4g",
            NetworkType::WiFi => "wifi",
        }
    }
}

impl fmt::Display for NetworkType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for NetworkType {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "3g" => Ok(NetworkType::ThreeG),
            "4g" => Ok(NetworkType::FourG),
            "wifi" => Ok(NetworkType::WiFi),
            other => Err(TraceError::UnknownLabel {
                kind: "network type",
                label: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    Foot,
    Car,
    Ferry,
    Train,
}

impl TransportMode {
    pub const ALL: [TransportMode; 4] = [
        TransportMode::Foot,
        TransportMode::Car,
        TransportMode::Ferry,
        TransportMode::Train,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TransportMode::Foot => "foot",
            TransportMode::Car => "car",
            TransportMode::Ferry => "ferry",
            TransportMode::Train => "train",
        }
    }
}

impl fmt::Display for TransportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TransportMode {
    type Err = TraceError;

    /// "bus" is accepted as an alias of `Car` (with a warning): the grouping
    /// table only distinguishes four modes.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "foot" => Ok(TransportMode::Foot),
            "car" => Ok(TransportMode::Car),
            "bus" => {
                log::warn!("transport mode \"bus\" is not a separate group; mapping to car");
                Ok(TransportMode::Car)
            }
            "ferry" => Ok(TransportMode::Ferry),
            "train" => Ok(TransportMode::Train),
            other => Err(TraceError::UnknownLabel {
                kind: "transport mode",
                label: other.to_string(),
            }),
        }
    }
}

/// One of the twelve (network type, transport mode) groups, numbered 1..=12.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(u8);

impl GroupId {
    pub const COUNT: u8 = 12;

    pub fn new(index: u8) -> Option<GroupId> {
        (1..=Self::COUNT).contains(&index).then_some(GroupId(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = GroupId> {
        (1..=Self::COUNT).map(GroupId)
    }

    /// Inverse of [`group_of`].
    pub fn labels(self) -> (NetworkType, TransportMode) {
        let i = (self.0 - 1) as usize;
        (NetworkType::ALL[i / 4], TransportMode::ALL[i % 4])
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G-{}", self.0)
    }
}

/// Column-major position in the 3×4 grouping table: network type selects the
/// column, transport mode the row.
pub fn group_of(nt: NetworkType, tm: TransportMode) -> GroupId {
    let col = match nt {
        NetworkType::ThreeG => 0,
        NetworkType::FourG => 1,
        NetworkType::WiFi => 2,
    };
    let row = match tm {
        TransportMode::Foot => 0,
        TransportMode::Car => 1,
        TransportMode::Ferry => 2,
        TransportMode::Train => 3,
    };
    GroupId(col * 4 + row + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    /// seconds
    pub t: f64,
    /// kbps
    pub bandwidth: f64,
    /// ms
    pub rtt: Option<f64>,
    pub loss: Option<f64>,
}

impl TraceSample {
    pub fn new(t: f64, bandwidth: f64) -> Self {
        TraceSample {
            t,
            bandwidth,
            rtt: None,
            loss: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub id: String,
    samples: Vec<TraceSample>,
    pub network_type: NetworkType,
    pub transport_mode: TransportMode,
}

impl Trace {
    /// Validates the sample list: at least two samples, strictly increasing
    /// non-negative timestamps, non-negative bandwidth and rtt, loss in [0,1].
    pub fn new(
        id: impl Into<String>,
        samples: Vec<TraceSample>,
        network_type: NetworkType,
        transport_mode: TransportMode,
    ) -> Result<Trace, TraceError> {
        if samples.len() < 2 {
            return Err(TraceError::TooFewSamples(samples.len()));
        }
        let mut prev: Option<f64> = None;
        for (i, s) in samples.iter().enumerate() {
            let line = i + 1;
            if !(s.t.is_finite() && s.t >= 0.0) {
                return Err(TraceError::Negative { line, field: "timestamp" });
            }
            if !(s.bandwidth.is_finite() && s.bandwidth >= 0.0) {
                return Err(TraceError::Negative { line, field: "bandwidth" });
            }
            if let Some(rtt) = s.rtt {
                if !(rtt.is_finite() && rtt >= 0.0) {
                    return Err(TraceError::Negative { line, field: "rtt" });
                }
            }
            if let Some(loss) = s.loss {
                if !(0.0..=1.0).contains(&loss) {
                    return Err(TraceError::LossOutOfRange { line, value: loss });
                }
            }
            if let Some(p) = prev {
                if s.t <= p {
                    return Err(TraceError::NonMonotone { line, t: s.t });
                }
            }
            prev = Some(s.t);
        }
        Ok(Trace {
            id: id.into(),
            samples,
            network_type,
            transport_mode,
        })
    }

    pub fn samples(&self) -> &[TraceSample] {
        &self.samples
    }

    pub fn group(&self) -> GroupId {
        group_of(self.network_type, self.transport_mode)
    }

    pub fn start(&self) -> f64 {
        self.samples[0].t
    }

    pub fn last_time(&self) -> f64 {
        self.samples[self.samples.len() - 1].t
    }

    /// Span covered by the trace: the last sample holds for one more
    /// sampling interval, so 300 samples at 1 Hz cover 300 s.
    pub fn duration(&self) -> f64 {
        let n = self.samples.len();
        let tail = self.samples[n - 1].t - self.samples[n - 2].t;
        self.last_time() + tail - self.start()
    }

    /// Index of the sample in effect at `t`.
    pub fn sample_index_at(&self, t: f64) -> Result<usize, TraceError> {
        if !(t >= self.start() && t <= self.last_time()) {
            return Err(TraceError::OutOfRange {
                t,
                start: self.start(),
                end: self.last_time(),
            });
        }
        // number of samples with timestamp <= t, minus one
        Ok(self.samples.partition_point(|s| s.t <= t) - 1)
    }

    pub fn sample_at(&self, t: f64) -> Result<&TraceSample, TraceError> {
        self.sample_index_at(t).map(|i| &self.samples[i])
    }
}

/// Piecewise-constant replay: bandwidth of the last sample with timestamp ≤ t.
pub fn bandwidth_at(trace: &Trace, t: f64) -> Result<f64, TraceError> {
    trace.sample_at(t).map(|s| s.bandwidth)
}

/// Parses `t_seconds,bandwidth_kbps[,rtt_ms[,loss_rate]]` rows. Blank lines,
/// `#` comments and a leading non-numeric header row are skipped.
pub fn parse_trace(
    id: &str,
    text: &str,
    labels: (NetworkType, TransportMode),
) -> Result<Trace, TraceError> {
    let mut samples = Vec::new();
    let mut seen_row = false;
    for (i, raw) in text.split('\n').enumerate() {
        let line = i + 1;
        let row = raw.trim_end_matches('\r').trim();
        if row.is_empty() || row.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        let malformed = || TraceError::MalformedRow {
            line,
            row: row.to_string(),
        };
        if !(2..=4).contains(&fields.len()) {
            return Err(malformed());
        }
        let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            // header row is only allowed before any data
            Err(_) if !seen_row && fields[0].parse::<f64>().is_err() => {
                seen_row = true;
                continue;
            }
            Err(_) => return Err(malformed()),
        };
        seen_row = true;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(malformed());
        }
        if values[0] < 0.0 {
            return Err(TraceError::Negative { line, field: "timestamp" });
        }
        if values[1] < 0.0 {
            return Err(TraceError::Negative { line, field: "bandwidth" });
        }
        if let Some(prev) = samples.last().map(|s: &TraceSample| s.t) {
            if values[0] <= prev {
                return Err(TraceError::NonMonotone { line, t: values[0] });
            }
        }
        samples.push(TraceSample {
            t: values[0],
            bandwidth: values[1],
            rtt: values.get(2).copied(),
            loss: values.get(3).copied(),
        });
    }
    if samples.is_empty() {
        return Err(TraceError::Empty);
    }
    Trace::new(id, samples, labels.0, labels.1)
}

/// Inverse of [`parse_trace`]. Uses shortest round-trip float formatting.
pub fn serialize_trace(trace: &Trace) -> String {
    let mut out = String::new();
    for s in &trace.samples {
        write!(out, "{},{}", s.t, s.bandwidth).unwrap();
        match (s.rtt, s.loss) {
            (None, None) => {}
            (Some(rtt), None) => write!(out, ",{rtt}").unwrap(),
            (rtt, Some(loss)) => write!(out, ",{},{loss}", rtt.unwrap_or(0.0)).unwrap(),
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub pretrain: BTreeSet<String>,
    pub finetune: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl CorpusSplit {
    /// Partition sizes for a corpus of `n` traces: test = round(0.2 n) and
    /// pretrain = round(0.8 · remaining), each at least 1.
    pub fn sizes(n: usize) -> (usize, usize, usize) {
        let test = ((0.2 * n as f64).round() as usize).max(1);
        let remaining = n - test;
        let pretrain = ((0.8 * remaining as f64).round() as usize).clamp(1, remaining - 1);
        (pretrain, remaining - pretrain, test)
    }

    pub fn select<'a>(&self, corpus: &'a [Trace], part: Partition) -> Vec<&'a Trace> {
        let ids = match part {
            Partition::Pretrain => &self.pretrain,
            Partition::Finetune => &self.finetune,
            Partition::Test => &self.test,
        };
        corpus.iter().filter(|t| ids.contains(&t.id)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Pretrain,
    Finetune,
    Test,
}

/// Seeded random three-way split. The corpus order does not matter: ids are
/// sorted before shuffling.
pub fn split_corpus(corpus: &[Trace], seed: u64) -> Result<CorpusSplit, TraceError> {
    let n = corpus.len();
    if n < 5 {
        return Err(TraceError::CorpusTooSmall(n));
    }
    let mut ids: Vec<&str> = corpus.iter().map(|t| t.id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let (pretrain, _finetune, test) = CorpusSplit::sizes(n);
    let own = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
    Ok(CorpusSplit {
        test: own(&ids[..test]),
        pretrain: own(&ids[test..test + pretrain]),
        finetune: own(&ids[test + pretrain..]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Waveform {
    #[default]
    Sine,
    Square,
}

/// Parameters of a synthetic bandwidth family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFamily {
    pub mean_kbps: f64,
    #[serde(default)]
    pub amplitude_kbps: f64,
    #[serde(default = "TraceFamily::default_period")]
    pub period_s: f64,
    #[serde(default)]
    pub noise_std_kbps: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub waveform: Waveform,
}

impl TraceFamily {
    fn default_period() -> f64 {
        60.0
    }

    pub fn constant(mean_kbps: f64, duration_s: f64) -> Self {
        TraceFamily {
            mean_kbps,
            amplitude_kbps: 0.0,
            period_s: Self::default_period(),
            noise_std_kbps: 0.0,
            duration_s,
            waveform: Waveform::Sine,
        }
    }

    fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: &str| Err(TraceError::InvalidGenerator(m.to_string()));
        if !(self.mean_kbps.is_finite() && self.mean_kbps > 0.0) {
            return bad("mean must be positive");
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 2.0) {
            return bad("duration must be at least 2 s");
        }
        if !(self.amplitude_kbps.is_finite() && self.amplitude_kbps >= 0.0) {
            return bad("amplitude must be non-negative");
        }
        if !(self.noise_std_kbps.is_finite() && self.noise_std_kbps >= 0.0) {
            return bad("noise std must be non-negative");
        }
        if !(self.period_s.is_finite() && self.period_s > 0.0) {
            return bad("period must be positive");
        }
        Ok(())
    }
}

/// 1 Hz samples of `max(0, mean + amplitude·wave(t) + N(0, noise²))`.
pub fn synthesize_trace(
    id: impl Into<String>,
    family: &TraceFamily,
    labels: (NetworkType, TransportMode),
    seed: u64,
) -> Result<Trace, TraceError> {
    family.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, family.noise_std_kbps)
        .map_err(|e| TraceError::InvalidGenerator(e.to_string()))?;
    // random phase so traces of one family are not aligned
    let phase: f64 = rand::Rng::random::<f64>(&mut rng) * family.period_s;
    let n = family.duration_s.floor() as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64;
            let x = 2.0 * std::f64::consts::PI * (t + phase) / family.period_s;
            let wave = match family.waveform {
                Waveform::Sine => x.sin(),
                Waveform::Square => {
                    if x.sin() >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            let eps = if family.noise_std_kbps > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            TraceSample::new(t, (family.mean_kbps + family.amplitude_kbps * wave + eps).max(0.0))
        })
        .collect();
    Trace::new(id, samples, labels.0, labels.1)
}

/// Sidecar label file: one `[[trace]]` table per CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, rename = "trace")]
    pub traces: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub network_type: String,
    pub transport_mode: String,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest, TraceError> {
        toml::from_str(text).map_err(|e| TraceError::Manifest(e.to_string()))
    }

    /// Loads every listed trace; relative paths resolve against `base`.
    pub fn load_traces(&self, base: &Path) -> Result<Vec<Trace>, TraceError> {
        let mut ids = BTreeSet::new();
        self.traces
            .iter()
            .map(|e| {
                if !ids.insert(e.id.as_str()) {
                    return Err(TraceError::Manifest(format!("duplicate trace id {:?}", e.id)));
                }
                let nt: NetworkType = e.network_type.parse()?;
                let tm: TransportMode = e.transport_mode.parse()?;
                let path = base.join(&e.path);
                let text = std::fs::read_to_string(&path).map_err(|e| TraceError::Io {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                parse_trace(&e.id, &text, (nt, tm))
            })
            .collect()
    }
}
