//! The network: two quantum-inspired (QE) gating layers, a single-head
//! self-attention recalibration block, two dense + batch-norm + LeakyReLU
//! stages, a projection head for metric-learning embeddings and a linear
//! classifier.
//!
//! ```text
//! x ─ QE₁ ─ attn(+x) ─ fc1 ─ bn1 ─ leaky ─ QE₂ ─ fc2 ─ bn2 ─ leaky ─┬─ fc3 ──────────────────────── logits
//!                                                                    └─ proj_fc1 ─ bn ─ relu ─ proj_fc2 ─ embedding
//! ```

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Mode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Which components are active. Disabled components are replaced by identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub use_quantum: bool,
    pub use_mixup: bool,
    pub use_attention: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_quantum: true,
            use_mixup: true,
            use_attention: true,
        }
    }
}

impl Ablation {
    /// The named variant with exactly these flags, if any.
    pub fn variant(self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.ablation() == self)
    }
}

/// Named ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoQuantum,
    NoMixup,
    NoAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoQuantum,
        Variant::NoMixup,
        Variant::NoAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoQuantum => "no-quantum",
            Variant::NoMixup => "no-mixup",
            Variant::NoAttention => "no-attention",
        }
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::NoQuantum => a.use_quantum = false,
            Variant::NoMixup => a.use_mixup = false,
            Variant::NoAttention => a.use_attention = false,
        }
        a
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (valid: full, no-quantum, no-mixup, no-attention)"
                ))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            num_classes,
            hidden1: 64,
            hidden2: 32,
            proj_hidden: 16,
            embed_dim: 8,
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ablation: Ablation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input dimension must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if [self.hidden1, self.hidden2, self.proj_hidden, self.embed_dim].contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    fn init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: uniform(rng, &[fan_in, fan_out], bound),
            bias: uniform(rng, &[fan_out], bound),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(f: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[f], 1.0),
            beta: Tensor::zeros(&[f]),
            running_mean: Tensor::zeros(&[f]),
            running_var: Tensor::full(&[f], 1.0),
        }
    }
}

/// Single-head attention weights; every projection is `[D, D]` with a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub theta1: Tensor,
    pub theta2: Tensor,
    pub attn: Attention,
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
    pub proj_fc1: Linear,
    pub proj_bn: BatchNorm,
    pub proj_fc2: Linear,
    pub fc3: Linear,
    /// `[C, embed_dim]` learnable class centroids used by the loss.
    pub centroids: Tensor,
}

/// Role of a stored array; decides weight decay and whether it is learnable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Angle,
    NormAffine,
    Centroid,
    RunningStat,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        self != ParamKind::RunningStat
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias | ParamKind::Centroid)
    }
}

macro_rules! for_each_param {
    ($p:expr, $visit:ident) => {{
        $visit!("theta1", ParamKind::Angle, $p.theta1);
        $visit!("theta2", ParamKind::Angle, $p.theta2);
        $visit!("attn.w_q", ParamKind::Weight, $p.attn.query.weight);
        $visit!("attn.b_q", ParamKind::Bias, $p.attn.query.bias);
        $visit!("attn.w_k", ParamKind::Weight, $p.attn.key.weight);
        $visit!("attn.b_k", ParamKind::Bias, $p.attn.key.bias);
        $visit!("attn.w_v", ParamKind::Weight, $p.attn.value.weight);
        $visit!("attn.b_v", ParamKind::Bias, $p.attn.value.bias);
        $visit!("attn.w_o", ParamKind::Weight, $p.attn.output.weight);
        $visit!("attn.b_o", ParamKind::Bias, $p.attn.output.bias);
        $visit!("fc1.weight", ParamKind::Weight, $p.fc1.weight);
        $visit!("fc1.bias", ParamKind::Bias, $p.fc1.bias);
        $visit!("bn1.gamma", ParamKind::NormAffine, $p.bn1.gamma);
        $visit!("bn1.beta", ParamKind::NormAffine, $p.bn1.beta);
        $visit!("bn1.running_mean", ParamKind::RunningStat, $p.bn1.running_mean);
        $visit!("bn1.running_var", ParamKind::RunningStat, $p.bn1.running_var);
        $visit!("fc2.weight", ParamKind::Weight, $p.fc2.weight);
        $visit!("fc2.bias", ParamKind::Bias, $p.fc2.bias);
        $visit!("bn2.gamma", ParamKind::NormAffine, $p.bn2.gamma);
        $visit!("bn2.beta", ParamKind::NormAffine, $p.bn2.beta);
        $visit!("bn2.running_mean", ParamKind::RunningStat, $p.bn2.running_mean);
        $visit!("bn2.running_var", ParamKind::RunningStat, $p.bn2.running_var);
        $visit!("proj_fc1.weight", ParamKind::Weight, $p.proj_fc1.weight);
        $visit!("proj_fc1.bias", ParamKind::Bias, $p.proj_fc1.bias);
        $visit!("proj_bn.gamma", ParamKind::NormAffine, $p.proj_bn.gamma);
        $visit!("proj_bn.beta", ParamKind::NormAffine, $p.proj_bn.beta);
        $visit!("proj_bn.running_mean", ParamKind::RunningStat, $p.proj_bn.running_mean);
        $visit!("proj_bn.running_var", ParamKind::RunningStat, $p.proj_bn.running_var);
        $visit!("proj_fc2.weight", ParamKind::Weight, $p.proj_fc2.weight);
        $visit!("proj_fc2.bias", ParamKind::Bias, $p.proj_fc2.bias);
        $visit!("fc3.weight", ParamKind::Weight, $p.fc3.weight);
        $visit!("fc3.bias", ParamKind::Bias, $p.fc3.bias);
        $visit!("centroids", ParamKind::Centroid, $p.centroids);
    }};
}

/// A named view of one stored array.
#[derive(Debug)]
pub struct Entry<'a> {
    pub name: &'static str,
    pub kind: ParamKind,
    pub tensor: &'a Tensor,
}

#[derive(Debug)]
pub struct EntryMut<'a> {
    pub name: &'static str,
    pub kind: ParamKind,
    pub tensor: &'a mut Tensor,
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (2.0 * rng::unit(rng) - 1.0) * bound)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

impl ModelParams {
    /// Draws a fresh parameter set. Dense weights and biases are
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, angles `U(-pi, pi)`, centroids
    /// `N(0, 0.1^2)`; batch norms start as identity with unit running variance.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.input_dim;
        let theta1 = uniform(rng, &[d], PI);
        let theta2 = uniform(rng, &[config.hidden1], PI);
        let attn = Attention {
            query: Linear::init(rng, d, d),
            key: Linear::init(rng, d, d),
            value: Linear::init(rng, d, d),
            output: Linear::init(rng, d, d),
        };
        let fc1 = Linear::init(rng, d, config.hidden1);
        let fc2 = Linear::init(rng, config.hidden1, config.hidden2);
        let proj_fc1 = Linear::init(rng, config.hidden2, config.proj_hidden);
        let proj_fc2 = Linear::init(rng, config.proj_hidden, config.embed_dim);
        let fc3 = Linear::init(rng, config.hidden2, config.num_classes);
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let centroids = Tensor::new(
            vec![config.num_classes, config.embed_dim],
            (0..config.num_classes * config.embed_dim)
                .map(|_| normal.sample(rng))
                .collect(),
        )?;
        Ok(ModelParams {
            theta1,
            theta2,
            attn,
            fc1,
            bn1: BatchNorm::new(config.hidden1),
            fc2,
            bn2: BatchNorm::new(config.hidden2),
            proj_fc1,
            proj_bn: BatchNorm::new(config.proj_hidden),
            proj_fc2,
            fc3,
            centroids,
        })
    }

    pub fn init_seeded(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init(config, &mut rng::stream(seed, rng::Stream::Init))
    }

    /// Every stored array in canonical order.
    pub fn entries(&self) -> Vec<Entry<'_>> {
        let mut out = Vec::with_capacity(33);
        macro_rules! visit {
            ($name:literal, $kind:expr, $t:expr) => {
                out.push(Entry {
                    name: $name,
                    kind: $kind,
                    tensor: &$t,
                })
            };
        }
        for_each_param!(self, visit);
        out
    }

    pub fn entries_mut(&mut self) -> Vec<EntryMut<'_>> {
        let mut out = Vec::with_capacity(33);
        macro_rules! visit {
            ($name:literal, $kind:expr, $t:expr) => {
                out.push(EntryMut {
                    name: $name,
                    kind: $kind,
                    tensor: &mut $t,
                })
            };
        }
        for_each_param!(self, visit);
        out
    }

    pub fn num_learnable(&self) -> usize {
        self.entries()
            .iter()
            .filter(|e| e.kind.learnable())
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|e| e.tensor.is_finite())
    }

    /// Shape-level configuration recovered from the stored arrays.
    pub fn infer_config(&self) -> ModelConfig {
        let mut c = ModelConfig::new(self.theta1.len(), self.centroids.rows());
        c.hidden1 = self.fc1.bias.len();
        c.hidden2 = self.fc2.bias.len();
        c.proj_hidden = self.proj_fc1.bias.len();
        c.embed_dim = self.proj_fc2.bias.len();
        c
    }

    /// Checks that array shapes agree with `config`.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelParams::init(config, &mut rng::seeded(0))?;
        for (a, b) in self.entries().iter().zip(reference.entries()) {
            if a.tensor.shape() != b.tensor.shape() {
                return Err(Error::shape(
                    "model",
                    format!(
                        "`{}` has shape {:?}, config expects {:?}",
                        a.name,
                        a.tensor.shape(),
                        b.tensor.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn commit_running(&mut self, update: RunningUpdate) {
        for (bn, (mean, var)) in [&mut self.bn1, &mut self.bn2, &mut self.proj_bn]
            .into_iter()
            .zip(update.stats)
        {
            bn.running_mean.data_mut().copy_from_slice(&mean);
            bn.running_var.data_mut().copy_from_slice(&var);
        }
    }
}

/// Graph handles for every learnable array, in [`ModelParams::entries`]
/// order (running statistics excluded).
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<(&'static str, Var)>,
}

impl BoundParams {
    /// Places the learnable arrays on `g`, as gradient-receiving leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(g: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .entries()
            .into_iter()
            .filter(|e| e.kind.learnable())
            .map(|e| {
                let t = e.tensor.clone();
                let v = if trainable { g.param(t) } else { g.constant(t) };
                (e.name, v)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("no bound parameter named {name}"))
    }
}

/// New running statistics for `bn1`, `bn2` and `proj_bn`, produced by a
/// train-mode forward pass.
#[derive(Clone, Debug)]
pub struct RunningUpdate {
    stats: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[B, C]`
    pub logits: Var,
    /// `[B, embed_dim]`
    pub embedding: Var,
    /// `[B, hidden2]`
    pub penultimate: Var,
    /// Present after a train-mode pass.
    pub running: Option<RunningUpdate>,
}

/// QE layer: `x_proj = x ⊙ cos θ`, per-row gate `s = σ(x_proj · sin θ)`,
/// output `x_proj · s`.
pub fn qe_forward(g: &mut Graph, x: Var, theta: Var) -> Result<Var> {
    let (_, d) = g.value(x).dims2("qe")?;
    if g.value(theta).len() != d {
        return Err(Error::shape(
            "qe",
            format!("theta has {} entries for {d} features", g.value(theta).len()),
        ));
    }
    let cos = g.cos(theta)?;
    let proj = g.mul_row(x, cos)?;
    let sin = g.sin(theta)?;
    let sin_col = g.reshape(sin, &[d, 1])?;
    let signal = g.matmul(proj, sin_col)?;
    let gate = g.sigmoid(signal)?;
    g.mul_col(proj, gate)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Single-head self-attention with each sample treated as a length-1
/// sequence, plus the residual connection. The softmax over one key is
/// identically 1, so the query and key projections receive zero gradient.
pub fn attention_forward(g: &mut Graph, x: Var, bound: &BoundParams) -> Result<Var> {
    let (_, d) = g.value(x).dims2("attention")?;
    if g.value(bound.get("attn.w_v")).shape() != [d, d] {
        return Err(Error::shape("attention", "weights do not match input width"));
    }
    let q = linear(g, x, bound.get("attn.w_q"), bound.get("attn.b_q"))?;
    let k = linear(g, x, bound.get("attn.w_k"), bound.get("attn.b_k"))?;
    let v = linear(g, x, bound.get("attn.w_v"), bound.get("attn.b_v"))?;
    let qk = g.mul(q, k)?;
    let score = g.sum_axis(qk, 1)?;
    let b = g.value(score).len();
    let score = g.reshape(score, &[b, 1])?;
    let score = g.scale(score, 1.0 / (d as f64).sqrt())?;
    let weight = g.softmax(score, 1)?;
    let weight = g.reshape(weight, &[b])?;
    let attended = g.mul_col(v, weight)?;
    let out = linear(g, attended, bound.get("attn.w_o"), bound.get("attn.b_o"))?;
    g.add(x, out)
}

fn batchnorm(
    g: &mut Graph,
    x: Var,
    bound: &BoundParams,
    prefix: &str,
    bn: &BatchNorm,
    config: &ModelConfig,
    mode: Mode,
    updates: &mut Vec<(Vec<f64>, Vec<f64>)>,
) -> Result<Var> {
    let mut mean = bn.running_mean.data().to_vec();
    let mut var = bn.running_var.data().to_vec();
    let out = g.batchnorm(
        x,
        bound.get(&format!("{prefix}.gamma")),
        bound.get(&format!("{prefix}.beta")),
        RunningStats {
            mean: &mut mean,
            var: &mut var,
            momentum: config.bn_momentum,
            eps: config.bn_eps,
        },
        mode,
    )?;
    updates.push((mean, var));
    Ok(out)
}

/// Full forward pass. Logits and embedding share one pass, so a train-mode
/// call moves each batch-norm running estimate exactly once; the caller
/// commits that move with [`ModelParams::commit_running`].
pub fn model_forward(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    x: Var,
    config: &ModelConfig,
    mode: Mode,
) -> Result<ForwardOutput> {
    let (_, d) = g.value(x).dims2("model")?;
    if d != config.input_dim || params.theta1.len() != d {
        return Err(Error::shape(
            "model",
            format!(
                "input has {d} features, config {} and params {}",
                config.input_dim,
                params.theta1.len()
            ),
        ));
    }
    let ab = config.ablation;
    let mut updates = Vec::with_capacity(3);

    let mut h = x;
    if ab.use_quantum {
        h = qe_forward(g, h, bound.get("theta1"))?;
    }
    if ab.use_attention {
        h = attention_forward(g, h, bound)?;
    }
    h = linear(g, h, bound.get("fc1.weight"), bound.get("fc1.bias"))?;
    h = batchnorm(g, h, bound, "bn1", &params.bn1, config, mode, &mut updates)?;
    h = g.leaky_relu(h, config.leaky_slope)?;
    if ab.use_quantum {
        h = qe_forward(g, h, bound.get("theta2"))?;
    }
    h = linear(g, h, bound.get("fc2.weight"), bound.get("fc2.bias"))?;
    h = batchnorm(g, h, bound, "bn2", &params.bn2, config, mode, &mut updates)?;
    let penultimate = g.leaky_relu(h, config.leaky_slope)?;

    let logits = linear(
        g,
        penultimate,
        bound.get("fc3.weight"),
        bound.get("fc3.bias"),
    )?;

    let p = linear(
        g,
        penultimate,
        bound.get("proj_fc1.weight"),
        bound.get("proj_fc1.bias"),
    )?;
    let p = batchnorm(g, p, bound, "proj_bn", &params.proj_bn, config, mode, &mut updates)?;
    let p = g.relu(p)?;
    let embedding = linear(
        g,
        p,
        bound.get("proj_fc2.weight"),
        bound.get("proj_fc2.bias"),
    )?;

    Ok(ForwardOutput {
        logits,
        embedding,
        penultimate,
        running: (mode == Mode::Train).then_some(RunningUpdate { stats: updates }),
    })
}

/// Eval-mode logits and embeddings for a feature matrix.
pub fn infer(params: &ModelParams, config: &ModelConfig, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let xv = g.constant(x.clone());
    let out = model_forward(&mut g, params, &bound, xv, config, Mode::Eval)?;
    Ok((g.value(out.logits).clone(), g.value(out.embedding).clone()))
}

/// Row-wise argmax of a `[B, C]` matrix; ties go to the lower index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rand_matrix(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Tensor {
        uniform(rng, &[r, c], scale)
    }

    #[test]
    fn qe_with_zero_angles_halves_input() {
        let mut rng = rng::seeded(3);
        let mut g = Graph::new();
        let x = g.constant(rand_matrix(&mut rng, 5, 4, 3.0));
        let th = g.constant(Tensor::zeros(&[4]));
        let y = qe_forward(&mut g, x, th).unwrap();
        for (o, i) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn qe_of_zero_input_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 4]));
        let th = g.constant(Tensor::vector(vec![0.3, -1.0, 2.0, 0.1]));
        let y = qe_forward(&mut g, x, th).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qe_matches_scalar_loop() {
        let mut rng = rng::seeded(11);
        let x = rand_matrix(&mut rng, 6, 5, 2.0);
        let theta = uniform(&mut rng, &[5], PI);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let tv = g.constant(theta.clone());
        let y = qe_forward(&mut g, xv, tv).unwrap();
        for i in 0..6 {
            let proj: Vec<f64> = (0..5).map(|j| x.get2(i, j) * theta.data()[j].cos()).collect();
            let dot: f64 = (0..5).map(|j| proj[j] * theta.data()[j].sin()).sum();
            let s = 1.0 / (1.0 + (-dot).exp());
            assert!(s > 0.0 && s < 1.0);
            for j in 0..5 {
                assert_abs_diff_eq!(g.value(y).get2(i, j), proj[j] * s, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn qe_rejects_wrong_theta_length() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let th = g.constant(Tensor::zeros(&[4]));
        assert!(qe_forward(&mut g, x, th).is_err());
    }

    fn params_with_attention(d: usize, wv: Tensor, wo: Tensor) -> (ModelParams, ModelConfig) {
        let cfg = ModelConfig::new(d, 2);
        let mut p = ModelParams::init_seeded(&cfg, 1).unwrap();
        p.attn.value.weight = wv;
        p.attn.value.bias = Tensor::zeros(&[d]);
        p.attn.output.weight = wo;
        p.attn.output.bias = Tensor::zeros(&[d]);
        (p, cfg)
    }

    #[test]
    fn attention_zero_branch_is_residual_only() {
        let (p, _) = params_with_attention(3, Tensor::identity(3), Tensor::zeros(&[3, 3]));
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &p, false);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap());
        let y = attention_forward(&mut g, x, &bound).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn attention_identity_doubles() {
        let (p, _) = params_with_attention(3, Tensor::identity(3), Tensor::identity(3));
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &p, false);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.0, -1.0]]).unwrap());
        let y = attention_forward(&mut g, x, &bound).unwrap();
        let doubled: Vec<f64> = g.value(x).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.value(y).data(), doubled.as_slice());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::new(7, 3);
        let a = ModelParams::init_seeded(&cfg, 42).unwrap();
        let b = ModelParams::init_seeded(&cfg, 42).unwrap();
        assert_eq!(a, b);
        for t in [&a.theta1, &a.theta2] {
            assert!(t.data().iter().all(|&v| v > -PI && v <= PI));
        }
        for (lin, fan_in) in [(&a.fc1, 7), (&a.fc2, 64), (&a.fc3, 32), (&a.proj_fc1, 32)] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            assert!(lin.weight.data().iter().all(|v| v.abs() <= bound));
        }
        assert_eq!(a.centroids.shape(), &[3, 8]);
    }

    #[test]
    fn forward_shapes_and_eval_determinism() {
        let cfg = ModelConfig::new(5, 3);
        let p = ModelParams::init_seeded(&cfg, 9).unwrap();
        let x = rand_matrix(&mut rng::seeded(4), 10, 5, 1.5);
        let (l1, e1) = infer(&p, &cfg, &x).unwrap();
        let (l2, e2) = infer(&p, &cfg, &x).unwrap();
        assert_eq!(l1.shape(), &[10, 3]);
        assert_eq!(e1.shape(), &[10, 8]);
        assert_eq!(l1, l2);
        assert_eq!(e1, e2);
    }

    #[test]
    fn train_forward_reports_running_update_once() {
        let cfg = ModelConfig::new(4, 2);
        let mut p = ModelParams::init_seeded(&cfg, 2).unwrap();
        let x = rand_matrix(&mut rng::seeded(5), 8, 4, 1.0);
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &p, true);
        let xv = g.constant(x);
        let out = model_forward(&mut g, &p, &bound, xv, &cfg, Mode::Train).unwrap();
        let before = p.bn1.running_mean.clone();
        p.commit_running(out.running.unwrap());
        assert_ne!(before, p.bn1.running_mean);
        let mut g2 = Graph::new();
        let b2 = BoundParams::bind(&mut g2, &p, false);
        assert_eq!(b2.vars.len(), p.entries().iter().filter(|e| e.kind.learnable()).count());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("no-mixup".parse::<Variant>().unwrap(), Variant::NoMixup);
        let err = "no-foo".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("no-quantum") && err.contains("no-attention"));
        assert!(!Variant::NoQuantum.ablation().use_quantum);
        assert!(Variant::NoQuantum.ablation().use_attention);
    }
}
