//! Small differentiable probability models and their training loop.
//!
//! A predictor is a linear model or a fully connected network with one
//! logistic output unit. Parameters live in one flat vector, layer by layer,
//! each layer stored as its weight matrix (row-major, `out x in`) followed by
//! its bias. Gradients are written by hand and checked against central
//! finite differences in [`grad_check`].

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix};
use crate::error::{Error, Result};
use crate::rng;

/// Symmetric clipping applied to every reported probability.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Linear,
    Feedforward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorArch {
    pub kind: ArchKind,
    pub hidden_sizes: Vec<usize>,
    pub input_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl PredictorArch {
    pub fn linear(input_dim: usize) -> Self {
        Self {
            kind: ArchKind::Linear,
            hidden_sizes: Vec::new(),
            input_dim,
            activation: Activation::default(),
        }
    }

    pub fn feedforward(input_dim: usize, hidden_sizes: Vec<usize>, activation: Activation) -> Self {
        Self {
            kind: ArchKind::Feedforward,
            hidden_sizes,
            input_dim,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        match self.kind {
            ArchKind::Linear if !self.hidden_sizes.is_empty() => {
                Err(Error::Config("linear models take no hidden layers".into()))
            }
            ArchKind::Feedforward if self.hidden_sizes.is_empty() => Err(Error::Config(
                "feedforward models need at least one hidden layer".into(),
            )),
            _ if self.hidden_sizes.contains(&0) => Err(Error::Config("hidden sizes must be at least 1".into())),
            _ => Ok(()),
        }
    }

    /// `(fan_in, fan_out)` of every layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_sizes {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, 1));
        dims
    }

    pub fn num_parameters(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Width of the representation feeding the output layer.
    pub fn representation_dim(&self) -> usize {
        self.hidden_sizes.last().copied().unwrap_or(self.input_dim)
    }

    /// `true` for weight entries, `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.num_parameters());
        for (i, o) in self.layer_dims() {
            mask.extend(std::iter::repeat_n(true, i * o));
            mask.extend(std::iter::repeat_n(false, o));
        }
        mask
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Cross-entropy of target `y` against logit `s`, exact for any `s`.
#[inline]
pub(crate) fn bce_with_logit(y: f64, s: f64) -> f64 {
    softplus(s) - y * s
}

/// `-[y ln z + (1 - y) ln(1 - z)]` with `z` clipped to `[eps, 1 - eps]`.
///
/// Accepts soft targets, so a teacher's prediction can stand in for `y`.
pub fn bce_loss(target: f64, prediction: f64) -> f64 {
    let z = clip_prob(prediction);
    let mut loss = 0.0;
    if target > 0.0 {
        loss -= target * z.ln();
    }
    if target < 1.0 {
        loss -= (1.0 - target) * (1.0 - z).ln();
    }
    loss
}

// ---------------------------------------------------------------------------
// Network evaluation over a flat parameter slice
// ---------------------------------------------------------------------------

/// Per-example activations, reused across examples.
#[derive(Debug, Clone)]
pub(crate) struct Scratch {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Scratch {
    pub(crate) fn new(arch: &PredictorArch) -> Self {
        let mut acts = vec![vec![0.0; arch.input_dim]];
        acts.extend(arch.hidden_sizes.iter().map(|&h| vec![0.0; h]));
        let deltas = acts.clone();
        Self { acts, deltas }
    }

    /// Input of the output layer from the last forward pass.
    pub(crate) fn representation(&self) -> &[f64] {
        self.acts.last().expect("input layer always present")
    }
}

pub(crate) fn forward(arch: &PredictorArch, params: &[f64], x: &[f64], s: &mut Scratch) -> f64 {
    s.acts[0].copy_from_slice(x);
    let dims = arch.layer_dims();
    let last = dims.len() - 1;
    let mut off = 0;
    for (l, &(fin, fout)) in dims.iter().enumerate() {
        let w = &params[off..off + fin * fout];
        let b = &params[off + fin * fout..off + fin * fout + fout];
        off += fin * fout + fout;
        if l == last {
            let input = &s.acts[l];
            return w.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>() + b[0];
        }
        let (before, after) = s.acts.split_at_mut(l + 1);
        let input = &before[l];
        for (o, out) in after[0].iter_mut().enumerate() {
            let row = &w[o * fin..(o + 1) * fin];
            let z = row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>() + b[o];
            *out = arch.activation.apply(z);
        }
    }
    unreachable!("output layer always present")
}

/// Accumulates `dlogit * d(logit)/d(params)` into `grad`, plus the effect of
/// an extra upstream gradient on the representation, after a [`forward`].
pub(crate) fn backward(
    arch: &PredictorArch,
    params: &[f64],
    s: &mut Scratch,
    dlogit: f64,
    d_repr: Option<&[f64]>,
    grad: &mut [f64],
) {
    let dims = arch.layer_dims();
    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &(fin, fout) in &dims {
        offsets.push(off);
        off += fin * fout + fout;
    }
    let last = dims.len() - 1;
    let delta_out = [dlogit];
    for l in (0..dims.len()).rev() {
        let (fin, fout) = dims[l];
        let off = offsets[l];
        let (lower, upper) = s.deltas.split_at_mut(l + 1);
        let delta: &[f64] = if l == last { &delta_out[..] } else { &upper[0] };
        let input = &s.acts[l];
        {
            let gw = &mut grad[off..off + fin * fout];
            for o in 0..fout {
                let d = delta[o];
                if d != 0.0 {
                    for (g, xi) in gw[o * fin..(o + 1) * fin].iter_mut().zip(input) {
                        *g += d * xi;
                    }
                }
            }
        }
        for (g, d) in grad[off + fin * fout..off + fin * fout + fout].iter_mut().zip(delta) {
            *g += d;
        }
        if l == 0 {
            break;
        }
        let w = &params[off..off + fin * fout];
        let prev = &mut lower[l];
        prev.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..fout {
            let d = delta[o];
            if d != 0.0 {
                for (p, wi) in prev.iter_mut().zip(&w[o * fin..(o + 1) * fin]) {
                    *p += d * wi;
                }
            }
        }
        if l == last {
            if let Some(extra) = d_repr {
                for (p, e) in prev.iter_mut().zip(extra) {
                    *p += e;
                }
            }
        }
        for (p, a) in prev.iter_mut().zip(&s.acts[l]) {
            *p *= arch.activation.derivative_from_output(*a);
        }
    }
}

fn glorot_init(arch: &PredictorArch, seed: u64) -> Vec<f64> {
    let mut params = Vec::with_capacity(arch.num_parameters());
    for (l, (fin, fout)) in arch.layer_dims().into_iter().enumerate() {
        let limit = (6.0 / (fin + fout) as f64).sqrt();
        let mut r = rng::stream(seed, "init", l as u64);
        params.extend((0..fin * fout).map(|_| r.random_range(-limit..limit)));
        params.extend(std::iter::repeat_n(0.0, fout));
    }
    params
}

// ---------------------------------------------------------------------------
// Predictor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferentiablePredictor {
    pub arch: PredictorArch,
    parameters: Vec<f64>,
    /// Seed used for initialization, if any.
    pub seed: Option<u64>,
}

impl DifferentiablePredictor {
    /// Glorot-uniform weights from the `init` substream of `seed`, zero biases.
    pub fn new(arch: PredictorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let parameters = glorot_init(&arch, seed);
        Ok(Self {
            arch,
            parameters,
            seed: Some(seed),
        })
    }

    pub fn zeros(arch: PredictorArch) -> Result<Self> {
        arch.validate()?;
        let parameters = vec![0.0; arch.num_parameters()];
        Ok(Self {
            arch,
            parameters,
            seed: None,
        })
    }

    pub fn from_parameters(arch: PredictorArch, parameters: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if parameters.len() != arch.num_parameters() {
            return Err(Error::DimensionMismatch {
                expected: arch.num_parameters(),
                got: parameters.len(),
            });
        }
        Ok(Self {
            arch,
            parameters,
            seed: None,
        })
    }

    pub fn parameters(&self) -> &[f64] {
        &self.parameters
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.parameters
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                got,
            });
        }
        Ok(())
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(forward(&self.arch, &self.parameters, x, &mut Scratch::new(&self.arch)))
    }

    /// Probability in `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(clip_prob(logistic(self.logit(x)?)))
    }

    pub fn predict_batch(&self, features: &Matrix) -> Result<Vec<f64>> {
        self.check_dim(features.cols())?;
        let mut s = Scratch::new(&self.arch);
        Ok((0..features.rows())
            .map(|i| clip_prob(logistic(forward(&self.arch, &self.parameters, features.row(i), &mut s))))
            .collect())
    }

    /// Mean weighted cross-entropy over the dataset, evaluated from logits.
    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        self.check_dim(data.dim())?;
        if data.is_empty() {
            return Err(Error::EmptyDataset("loss needs at least one example".into()));
        }
        Ok(Trainable::supervised_loss(self, data))
    }

    /// Gradient of [`loss`](Self::loss) with respect to the flat parameters.
    pub fn gradient(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_dim(data.dim())?;
        if data.is_empty() {
            return Err(Error::EmptyDataset("gradient needs at least one example".into()));
        }
        let rows: Vec<usize> = (0..data.len()).collect();
        let mut grad = vec![0.0; self.parameters.len()];
        self.supervised_grad(data, &rows, &mut grad);
        Ok(grad)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictor serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("bad checkpoint: {e}")))?;
        let seed = raw.seed;
        let mut model = Self::from_parameters(raw.arch, raw.parameters)?;
        model.seed = seed;
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// A model the training loop can update: flat parameters plus a supervised
/// cross-entropy path.
pub(crate) trait Trainable {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn l2_mask(&self) -> Vec<bool>;
    /// Adds the gradient of `(1/|rows|) sum w_i BCE_i` and returns that loss.
    fn supervised_grad(&self, data: &Dataset, rows: &[usize], grad: &mut [f64]) -> f64;
    fn supervised_loss(&self, data: &Dataset) -> f64;
}

impl Trainable for DifferentiablePredictor {
    fn params(&self) -> &[f64] {
        &self.parameters
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.parameters
    }

    fn l2_mask(&self) -> Vec<bool> {
        self.arch.weight_mask()
    }

    fn supervised_grad(&self, data: &Dataset, rows: &[usize], grad: &mut [f64]) -> f64 {
        supervised_grad_slice(&self.arch, &self.parameters, data, rows, grad)
    }

    fn supervised_loss(&self, data: &Dataset) -> f64 {
        supervised_loss_slice(&self.arch, &self.parameters, data)
    }
}

pub(crate) fn supervised_grad_slice(
    arch: &PredictorArch,
    params: &[f64],
    data: &Dataset,
    rows: &[usize],
    grad: &mut [f64],
) -> f64 {
    let mut s = Scratch::new(arch);
    let scale = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    for &i in rows {
        let logit = forward(arch, params, data.features.row(i), &mut s);
        let (y, w) = (data.targets[i], data.weights[i]);
        loss += w * bce_with_logit(y, logit);
        backward(arch, params, &mut s, w * scale * (logistic(logit) - y), None, grad);
    }
    loss * scale
}

pub(crate) fn supervised_loss_slice(arch: &PredictorArch, params: &[f64], data: &Dataset) -> f64 {
    let mut s = Scratch::new(arch);
    let total: f64 = (0..data.len())
        .map(|i| data.weights[i] * bce_with_logit(data.targets[i], forward(arch, params, data.features.row(i), &mut s)))
        .sum();
    total / data.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Falls linearly from the base rate to zero over all steps.
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl TrainConfig {
    /// Adaptive-moment defaults for networks.
    pub fn adam(seed: u64) -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 30,
            batch_size: 64,
            optimizer: Optimizer::Adam,
            l2: 0.0,
            schedule: LrSchedule::Constant,
            seed,
        }
    }

    /// Plain gradient-descent defaults for linear models.
    pub fn sgd(seed: u64) -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 30,
            batch_size: 64,
            optimizer: Optimizer::Sgd,
            l2: 0.0,
            schedule: LrSchedule::Constant,
            seed,
        }
    }

    /// The default optimizer for an architecture.
    pub fn for_arch(arch: &PredictorArch, seed: u64) -> Self {
        match arch.kind {
            ArchKind::Linear => Self::sgd(seed),
            ArchKind::Feedforward => Self::adam(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        Ok(())
    }
}

struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(cfg: &TrainConfig, n: usize) -> Self {
        let (m, v) = match cfg.optimizer {
            Optimizer::Adam => (vec![0.0; n], vec![0.0; n]),
            Optimizer::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind: cfg.optimizer,
            m,
            v,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                self.t += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Position of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct StepInfo {
    pub epoch: usize,
    pub step: usize,
}

fn objective<T: Trainable>(model: &T, data: &Dataset, l2: f64, mask: &[bool]) -> f64 {
    let penalty: f64 = model
        .params()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| p * p)
        .sum();
    model.supervised_loss(data) + 0.5 * l2 * penalty
}

/// Mini-batch training. Each epoch visits the labeled data in the order of
/// the `shuffle:epoch` substream; `extra` may add further gradient terms per
/// step and returns their loss. History holds the supervised objective
/// before training and after every epoch.
pub(crate) fn fit<T: Trainable>(
    model: &mut T,
    data: &Dataset,
    cfg: &TrainConfig,
    mut extra: impl FnMut(&T, StepInfo, &mut [f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    let mask = model.l2_mask();
    let n_params = model.params().len();
    let mut opt = OptimizerState::new(cfg, n_params);
    let mut grad = vec![0.0; n_params];
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    history.push(objective(model, data, cfg.l2, &mask));
    let mut step = 0;
    let total_steps = (cfg.epochs * data.len().div_ceil(cfg.batch_size)) as f64;
    let mut order: Vec<usize> = Vec::with_capacity(data.len());
    for epoch in 0..cfg.epochs {
        order.clear();
        order.extend(0..data.len());
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle:epoch", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = model.supervised_grad(data, batch, &mut grad);
            loss += extra(model, StepInfo { epoch, step }, &mut grad)?;
            if cfg.l2 > 0.0 {
                for ((g, p), &m) in grad.iter_mut().zip(model.params()).zip(&mask) {
                    if m {
                        *g += cfg.l2 * p;
                    }
                }
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, step, loss });
            }
            let lr = match cfg.schedule {
                LrSchedule::Constant => cfg.learning_rate,
                LrSchedule::LinearDecay => cfg.learning_rate * (1.0 - step as f64 / total_steps),
            };
            opt.step(model.params_mut(), &grad, lr);
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch, step, loss });
            }
            step += 1;
        }
        let obj = objective(model, data, cfg.l2, &mask);
        if !obj.is_finite() {
            return Err(Error::Divergence { epoch, step, loss: obj });
        }
        history.push(obj);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: DifferentiablePredictor,
    pub loss_history: Vec<f64>,
}

/// Trains a copy of `model` on the weighted cross-entropy of `data`.
pub fn train(model: &DifferentiablePredictor, data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    model.check_dim(data.dim())?;
    let mut model = model.clone();
    let loss_history = fit(&mut model, data, cfg, |_, _, _| Ok(0.0))?;
    Ok(Trained { model, loss_history })
}

/// Largest relative discrepancy between analytic and central-difference
/// gradients of the mean weighted cross-entropy on `batch`.
pub fn grad_check(model: &DifferentiablePredictor, batch: &Dataset, epsilon: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "epsilon must lie in [1e-6, 1e-3], got {epsilon}"
        )));
    }
    let analytic = model.gradient(batch)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, &ga) in analytic.iter().enumerate() {
        let orig = probe.parameters[i];
        probe.parameters[i] = orig + epsilon;
        let up = probe.loss(batch)?;
        probe.parameters[i] = orig - epsilon;
        let down = probe.loss(batch)?;
        probe.parameters[i] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        worst = worst.max((ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8));
    }
    Ok(worst)
}
