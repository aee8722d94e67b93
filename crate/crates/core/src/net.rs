//! Small actor-critic MLP: dense ReLU trunk feeding a softmax policy head and
//! a scalar value head, with hand-written backpropagation of the n-step
//! advantage actor-critic loss.

use rand::distr::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("incompatible layer dims: layer {layer} expects input {expected}, previous output is {found}")]
    IncompatibleDims {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("architecture must have at least one hidden layer with non-zero dims")]
    EmptyArch,
    #[error("input has {found} features, network expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("non-finite value in {0} (training diverged; reduce the learning rate)")]
    NonFinite(&'static str),
    #[error("shape mismatch between parameter sets")]
    ShapeMismatch,
    #[error("freeze mask has {found} entries, model has {expected} layers")]
    MaskLength { expected: usize, found: usize },
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("action {action} out of range for {len} outputs")]
    BadAction { action: usize, len: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn relu(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation: Activation::Relu,
        }
    }
}

/// Trunk of ReLU layers with the given widths.
pub fn mlp_arch(input_dim: usize, hidden: &[usize]) -> Vec<LayerSpec> {
    let mut prev = input_dim;
    hidden
        .iter()
        .map(|&w| {
            let l = LayerSpec::relu(prev, w);
            prev = w;
            l
        })
        .collect()
}

/// input → 64 → 32, shared by every training scheme.
pub fn default_arch(input_dim: usize) -> Vec<LayerSpec> {
    mlp_arch(input_dim, &[64, 32])
}

/// Dense layer `y = act(W x + b)` with `W` stored row-major (out × in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(spec: LayerSpec) -> Dense {
        Dense {
            in_dim: spec.in_dim,
            out_dim: spec.out_dim,
            activation: spec.activation,
            weights: vec![0.0; spec.in_dim * spec.out_dim],
            bias: vec![0.0; spec.out_dim],
        }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre: Vec<f64> = self
            .weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect();
        let out = match self.activation {
            Activation::Relu => pre.iter().map(|&z| z.max(0.0)).collect(),
            Activation::Identity => pre.clone(),
        };
        (pre, out)
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.in_dim == other.in_dim && self.out_dim == other.out_dim && self.activation == other.activation
    }
}

/// Trunk layers followed by the policy head and the value head (the last two
/// entries of `layers`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

/// Per-layer trainability, heads included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn all_trainable(layers: usize) -> Self {
        FreezeMask {
            trainable: vec![true; layers],
        }
    }

    pub fn all_frozen(layers: usize) -> Self {
        FreezeMask {
            trainable: vec![false; layers],
        }
    }

    pub fn is_trainable(&self, layer: usize) -> bool {
        self.trainable[layer]
    }

    pub fn frozen_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.trainable.iter().enumerate().filter(|(_, t)| !**t).map(|(i, _)| i)
    }

    fn check(&self, layers: usize) -> Result<(), NetError> {
        if self.trainable.len() == layers {
            Ok(())
        } else {
            Err(NetError::MaskLength {
                expected: layers,
                found: self.trainable.len(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub gamma: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub rollout_len: usize,
    /// Global L2 norm cap applied before an update; `None` disables it.
    pub clip_norm: Option<f64>,
    /// Training rewards are clamped to `[-c, c]` before computing returns;
    /// `None` uses them as is.
    pub reward_clip: Option<f64>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            gamma: 0.99,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 1e-3,
            rollout_len: 16,
            clip_norm: Some(40.0),
            reward_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// V(s_T) of the state following the last step (0 if terminal).
    pub bootstrap: f64,
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_actions(&self) -> usize {
        self.layers[self.layers.len() - 2].out_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn trunk(&self) -> &[Dense] {
        &self.layers[..self.layers.len() - 2]
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut i = index;
        for l in &mut self.layers {
            if i < l.weights.len() {
                return &mut l.weights[i];
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                return &mut l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index {index} out of range");
    }

    /// Versioned little-endian binary dump: magic, layer count, then per
    /// layer dims, activation and row-major weights followed by biases.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.num_parameters());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
            out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
            out.push(l.activation.code());
            for x in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<ModelParams, NetError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(NetError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let activation = Activation::from_code(r.take(1)?[0])
                .ok_or_else(|| NetError::Checkpoint("bad activation code".into()))?;
            let weights = (0..in_dim * out_dim).map(|_| r.f64()).collect::<Result<_, _>>()?;
            let bias = (0..out_dim).map(|_| r.f64()).collect::<Result<_, _>>()?;
            layers.push(Dense {
                in_dim,
                out_dim,
                activation,
                weights,
                bias,
            });
        }
        if r.pos != bytes.len() {
            return Err(NetError::Checkpoint("trailing bytes".into()));
        }
        let params = ModelParams { layers };
        params.validate()?;
        Ok(params)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_checkpoint()))
    }

    fn validate(&self) -> Result<(), NetError> {
        let n = self.layers.len();
        if n < 3 {
            return Err(NetError::EmptyArch);
        }
        for (i, pair) in self.layers[..n - 1].windows(2).enumerate() {
            // both heads read the last trunk output
            let found = if i + 1 == n - 1 {
                self.layers[n - 3].out_dim
            } else {
                pair[0].out_dim
            };
            if pair[1].in_dim != found {
                return Err(NetError::IncompatibleDims {
                    layer: i + 1,
                    expected: pair[1].in_dim,
                    found,
                });
            }
        }
        if self.layers[n - 1].in_dim != self.layers[n - 3].out_dim || self.layers[n - 1].out_dim != 1 {
            return Err(NetError::Checkpoint("malformed value head".into()));
        }
        if !self.is_finite() {
            return Err(NetError::NonFinite("parameters"));
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ABRCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(NetError::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Gradients {
    pub fn same_shape(&self, params: &ModelParams) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }

    fn same_shape_grads(&self, other: &Gradients) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.len() == b.weights.len() && a.bias.len() == b.bias.len())
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.values_mut().for_each(|x| *x *= k);
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<(), NetError> {
        if !self.same_shape_grads(other) {
            return Err(NetError::ShapeMismatch);
        }
        self.values_mut().zip(other.values()).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Elementwise mean of a non-empty set of same-shaped gradients.
    pub fn mean<'a>(grads: impl IntoIterator<Item = &'a Gradients>) -> Result<Gradients, NetError> {
        let mut iter = grads.into_iter();
        let mut acc = iter.next().ok_or(NetError::EmptyTrajectory)?.clone();
        let mut n = 1usize;
        for g in iter {
            acc.add_assign(g)?;
            n += 1;
        }
        acc.scale(1.0 / n as f64);
        Ok(acc)
    }

    /// Rescales to at most `max_norm` in L2; returns the pre-clip norm.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    /// Zeroes the frozen layers.
    pub fn masked(mut self, mask: &FreezeMask) -> Gradients {
        for i in mask.frozen_layers() {
            let l = &mut self.layers[i];
            l.weights.iter_mut().for_each(|x| *x = 0.0);
            l.bias.iter_mut().for_each(|x| *x = 0.0);
        }
        self
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for x in self.values() {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Glorot-uniform weights, zero biases, deterministic under `seed`.
pub fn init_params(arch: &[LayerSpec], num_actions: usize, seed: u64) -> Result<ModelParams, NetError> {
    if arch.is_empty() || num_actions == 0 || arch.iter().any(|l| l.in_dim == 0 || l.out_dim == 0) {
        return Err(NetError::EmptyArch);
    }
    for (i, w) in arch.windows(2).enumerate() {
        if w[1].in_dim != w[0].out_dim {
            return Err(NetError::IncompatibleDims {
                layer: i + 1,
                expected: w[1].in_dim,
                found: w[0].out_dim,
            });
        }
    }
    let top = arch[arch.len() - 1].out_dim;
    let specs = arch.iter().copied().chain([
        LayerSpec {
            in_dim: top,
            out_dim: num_actions,
            activation: Activation::Identity,
        },
        LayerSpec {
            in_dim: top,
            out_dim: 1,
            activation: Activation::Identity,
        },
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = specs
        .map(|spec| {
            let mut d = Dense::zeros(spec);
            let limit = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            d.weights.iter_mut().for_each(|w| *w = rng.sample(dist));
            d
        })
        .collect();
    Ok(ModelParams { layers })
}

struct Cache {
    /// inputs to each trunk layer, then the trunk output
    acts: Vec<Vec<f64>>,
    /// trunk pre-activations
    pres: Vec<Vec<f64>>,
    probs: Vec<f64>,
    value: f64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    // floor keeps log π finite when a logit gap underflows exp
    e.into_iter().map(|x| (x / s).max(f64::MIN_POSITIVE)).collect()
}

fn forward_cached(params: &ModelParams, state: &[f64]) -> Result<Cache, NetError> {
    if state.len() != params.input_dim() {
        return Err(NetError::DimMismatch {
            expected: params.input_dim(),
            found: state.len(),
        });
    }
    if state.iter().any(|x| !x.is_finite()) {
        return Err(NetError::NonFiniteInput);
    }
    let mut acts = vec![state.to_vec()];
    let mut pres = Vec::new();
    for layer in params.trunk() {
        let (pre, out) = layer.forward(acts.last().unwrap());
        pres.push(pre);
        acts.push(out);
    }
    let n = params.layers.len();
    let top = acts.last().unwrap();
    let (logits, _) = params.layers[n - 2].forward(top);
    let (value, _) = params.layers[n - 1].forward(top);
    Ok(Cache {
        acts,
        pres,
        probs: softmax(&logits),
        value: value[0],
    })
}

/// Policy probabilities and state value.
pub fn forward(params: &ModelParams, state: &[f64]) -> Result<(Vec<f64>, f64), NetError> {
    let c = forward_cached(params, state)?;
    Ok((c.probs, c.value))
}

/// Inverse-CDF draw from `probs`.
pub fn sample_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    // rounding left u above the total mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn greedy_action(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

/// Discounted returns `R_t = r_t + γ R_{t+1}` with `R_T = bootstrap`.
pub fn discounted_returns(rewards: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

impl TrainHyper {
    fn training_rewards(&self, traj: &Trajectory) -> Vec<f64> {
        traj.steps
            .iter()
            .map(|s| match self.reward_clip {
                Some(c) => s.reward.clamp(-c, c),
                None => s.reward,
            })
            .collect()
    }
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Loss summed over the trajectory:
/// `-A_t log π(a_t|s_t) + c_v (R_t - V(s_t))² - β H(π(·|s_t))`,
/// with the advantage `A_t = R_t - V(s_t)` held constant in the policy term.
pub fn a3c_loss(params: &ModelParams, traj: &Trajectory, hyper: &TrainHyper) -> Result<f64, NetError> {
    if traj.steps.is_empty() {
        return Err(NetError::EmptyTrajectory);
    }
    let rewards = hyper.training_rewards(traj);
    let returns = discounted_returns(&rewards, traj.bootstrap, hyper.gamma);
    let mut loss = 0.0;
    for (step, ret) in traj.steps.iter().zip(&returns) {
        let (probs, value) = forward(params, &step.state)?;
        let p = *probs.get(step.action).ok_or(NetError::BadAction {
            action: step.action,
            len: probs.len(),
        })?;
        let adv = ret - value;
        loss += -adv * p.ln() + hyper.value_coef * adv * adv - hyper.entropy_coef * entropy(&probs);
    }
    Ok(loss)
}

/// Analytic gradients of [`a3c_loss`] with respect to every parameter, where
/// the advantage in the policy term is treated as a constant.
pub fn a3c_gradients(
    params: &ModelParams,
    traj: &Trajectory,
    hyper: &TrainHyper,
) -> Result<(Gradients, f64), NetError> {
    if traj.steps.is_empty() {
        return Err(NetError::EmptyTrajectory);
    }
    if traj.steps.iter().any(|s| !s.reward.is_finite()) || !traj.bootstrap.is_finite() {
        return Err(NetError::NonFinite("rewards"));
    }
    let rewards = hyper.training_rewards(traj);
    let returns = discounted_returns(&rewards, traj.bootstrap, hyper.gamma);
    let mut grads = params.zero_grads();
    let mut loss = 0.0;
    let n = params.layers.len();
    let trunk_len = n - 2;

    for (step, ret) in traj.steps.iter().zip(&returns) {
        let c = forward_cached(params, &step.state)?;
        let k = c.probs.len();
        if step.action >= k {
            return Err(NetError::BadAction {
                action: step.action,
                len: k,
            });
        }
        let adv = ret - c.value;
        let h = entropy(&c.probs);
        loss += -adv * c.probs[step.action].ln() + hyper.value_coef * adv * adv - hyper.entropy_coef * h;

        // dL/dlogit_j = A (p_j - 1[j=a]) + β p_j (ln p_j + H)
        let d_logits: Vec<f64> = c
            .probs
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let onehot = if j == step.action { 1.0 } else { 0.0 };
                let ent = if p > 0.0 { p * (p.ln() + h) } else { 0.0 };
                adv * (p - onehot) + hyper.entropy_coef * ent
            })
            .collect();
        let d_value = [-2.0 * hyper.value_coef * adv];

        let top = &c.acts[trunk_len];
        let mut d_top = vec![0.0; top.len()];
        for (li, d_out) in [(n - 2, &d_logits[..]), (n - 1, &d_value[..])] {
            let layer = &params.layers[li];
            let g = &mut grads.layers[li];
            for (o, &d) in d_out.iter().enumerate() {
                g.bias[o] += d;
                let row = o * layer.in_dim;
                for (i, &x) in top.iter().enumerate() {
                    g.weights[row + i] += d * x;
                    d_top[i] += d * layer.weights[row + i];
                }
            }
        }

        let mut d_out = d_top;
        for li in (0..trunk_len).rev() {
            let layer = &params.layers[li];
            if layer.activation == Activation::Relu {
                for (d, &z) in d_out.iter_mut().zip(&c.pres[li]) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &c.acts[li];
            let g = &mut grads.layers[li];
            let mut d_in = vec![0.0; layer.in_dim];
            for (o, &d) in d_out.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = o * layer.in_dim;
                for (i, &x) in input.iter().enumerate() {
                    g.weights[row + i] += d * x;
                    d_in[i] += d * layer.weights[row + i];
                }
            }
            d_out = d_in;
        }
    }

    if !loss.is_finite() {
        return Err(NetError::NonFinite("loss"));
    }
    if !grads.is_finite() {
        return Err(NetError::NonFinite("gradients"));
    }
    Ok((grads, loss))
}

/// One plain gradient-descent step on the trainable layers. Frozen layers
/// are copied through untouched.
pub fn apply_update(
    params: &ModelParams,
    grads: &Gradients,
    learning_rate: f64,
    mask: &FreezeMask,
) -> Result<ModelParams, NetError> {
    if !grads.same_shape(params) {
        return Err(NetError::ShapeMismatch);
    }
    mask.check(params.layers.len())?;
    let mut out = params.clone();
    for (i, (layer, g)) in out.layers.iter_mut().zip(&grads.layers).enumerate() {
        if !mask.is_trainable(i) {
            continue;
        }
        layer.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= learning_rate * d);
        layer.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= learning_rate * d);
    }
    if !out.is_finite() {
        return Err(NetError::NonFinite("parameters"));
    }
    Ok(out)
}
