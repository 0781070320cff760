//! Small differentiable classifiers with closed-form per-sample backprop.
//!
//! Two architectures share one flat parameter vector layout:
//!
//! * linear softmax: `W (K x d)`, then `b (K)` when biased
//! * one hidden layer: `W1 (h x d)`, `b1 (h)`, `W2 (K x h)`, `b2 (K)`
//!
//! Matrices are row-major. Losses are cross-entropy against label-smoothed
//! targets, computed through a max-shifted log-sum-exp.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inner_solver::{LossVector, WeightVector, SIMPLEX_TOL};

pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("label smoothing must lie in [0, 1), got {0}")]
    InvalidSmoothing(f64),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("weights do not form a distribution")]
    InvalidWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Hidden width; `None` is the linear softmax model.
    pub hidden: Option<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub classes: usize,
    #[serde(default = "default_bias")]
    pub bias: bool,
}

fn default_bias() -> bool {
    true
}

impl Architecture {
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: None,
            activation: Activation::Tanh,
            classes,
            bias: true,
        }
    }

    pub fn mlp(input_dim: usize, hidden: usize, activation: Activation, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: Some(hidden),
            activation,
            classes,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidArchitecture(
                "input_dim must be >= 1".into(),
            ));
        }
        if self.classes < 2 {
            return Err(ModelError::InvalidArchitecture(
                "need at least 2 classes".into(),
            ));
        }
        if self.hidden == Some(0) {
            return Err(ModelError::InvalidArchitecture(
                "hidden width must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let b = usize::from(self.bias);
        match self.hidden {
            None => self.classes * (self.input_dim + b),
            Some(h) => h * (self.input_dim + b) + self.classes * (h + b),
        }
    }
}

/// Architecture plus flat parameter vector. Serializes as the model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub params: Vec<f64>,
}

impl ModelParams {
    pub fn new(architecture: Architecture, params: Vec<f64>) -> Result<Self, ModelError> {
        architecture.validate()?;
        if params.len() != architecture.param_count() {
            return Err(ModelError::Shape(format!(
                "{} parameters for an architecture needing {}",
                params.len(),
                architecture.param_count()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFinite("parameters"));
        }
        Ok(Self {
            architecture,
            params,
        })
    }

    /// Uniform init in `[-s, s]`, `s = 1/sqrt(fan_in)` per layer.
    pub fn init<R: Rng + ?Sized>(
        architecture: Architecture,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        architecture.validate()?;
        let mut params = Vec::with_capacity(architecture.param_count());
        let mut layer = |rng: &mut R, fan_in: usize, fan_out: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            let n = fan_out * fan_in + if architecture.bias { fan_out } else { 0 };
            params.extend((0..n).map(|_| rng.random_range(-s..=s)));
        };
        match architecture.hidden {
            None => layer(rng, architecture.input_dim, architecture.classes),
            Some(h) => {
                layer(rng, architecture.input_dim, h);
                layer(rng, h, architecture.classes);
            }
        }
        Ok(Self {
            architecture,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Row-major `rows x cols` feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ModelError::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Label-smoothed target distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedLabel(Vec<f64>);

impl SmoothedLabel {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `(1 - a) * onehot(y) + a / K`.
pub fn smooth_labels(
    label: usize,
    classes: usize,
    smoothing: f64,
) -> Result<SmoothedLabel, ModelError> {
    if label >= classes {
        return Err(ModelError::LabelOutOfRange { label, classes });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(ModelError::InvalidSmoothing(smoothing));
    }
    let off = smoothing / classes as f64;
    let mut y = vec![off; classes];
    y[label] = (1.0 - smoothing) + off;
    Ok(SmoothedLabel(y))
}

/// Per-sample gradient, same layout as [`ModelParams::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient(Vec<f64>);

impl BatchGradient {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

struct Forward {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

// y = W x (+ b) with W stored row-major at the head of `w`
fn affine(w: &[f64], x: &[f64], out_dim: usize, bias: bool) -> Vec<f64> {
    let d = x.len();
    (0..out_dim)
        .map(|k| {
            let row = &w[k * d..(k + 1) * d];
            let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            if bias {
                dot + w[out_dim * d + k]
            } else {
                dot
            }
        })
        .collect()
}

fn forward(model: &ModelParams, x: &[f64]) -> Forward {
    let arch = &model.architecture;
    match arch.hidden {
        None => Forward {
            hidden_pre: Vec::new(),
            hidden: Vec::new(),
            logits: affine(&model.params, x, arch.classes, arch.bias),
        },
        Some(h) => {
            let split = h * (arch.input_dim + usize::from(arch.bias));
            let hidden_pre = affine(&model.params[..split], x, h, arch.bias);
            let hidden: Vec<f64> = hidden_pre
                .iter()
                .map(|&z| arch.activation.apply(z))
                .collect();
            let logits = affine(&model.params[split..], &hidden, arch.classes, arch.bias);
            Forward {
                hidden_pre,
                hidden,
                logits,
            }
        }
    }
}

/// Returns `(log_softmax, softmax)` of `logits`, shifted by the max.
pub fn log_softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let logp: Vec<f64> = logits.iter().map(|z| z - lse).collect();
    let p = logp.iter().map(|l| l.exp()).collect();
    (logp, p)
}

fn check_batch(
    model: &ModelParams,
    inputs: &FeatureMatrix,
    labels: &[SmoothedLabel],
) -> Result<(), ModelError> {
    let arch = &model.architecture;
    if inputs.cols() != arch.input_dim {
        return Err(ModelError::Shape(format!(
            "inputs have {} features, model expects {}",
            inputs.cols(),
            arch.input_dim
        )));
    }
    if labels.len() != inputs.rows() {
        return Err(ModelError::Shape(format!(
            "{} labels for {} inputs",
            labels.len(),
            inputs.rows()
        )));
    }
    if let Some(l) = labels.iter().find(|l| l.0.len() != arch.classes) {
        return Err(ModelError::Shape(format!(
            "label over {} classes, model has {}",
            l.0.len(),
            arch.classes
        )));
    }
    if model.params.len() != arch.param_count() {
        return Err(ModelError::Shape(
            "parameter count does not match architecture".into(),
        ));
    }
    Ok(())
}

fn cross_entropy(target: &[f64], logp: &[f64]) -> f64 {
    -target.iter().zip(logp).map(|(y, l)| y * l).sum::<f64>()
}

pub fn probabilities(model: &ModelParams, x: &[f64]) -> Vec<f64> {
    log_softmax(&forward(model, x).logits).1
}

pub fn log_probabilities(model: &ModelParams, x: &[f64]) -> Vec<f64> {
    log_softmax(&forward(model, x).logits).0
}

/// Argmax class; ties go to the lowest index.
pub fn predict(model: &ModelParams, x: &[f64]) -> usize {
    let logits = forward(model, x).logits;
    let mut best = 0;
    for (k, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = k;
        }
    }
    best
}

pub fn per_sample_losses(
    model: &ModelParams,
    inputs: &FeatureMatrix,
    labels: &[SmoothedLabel],
) -> Result<LossVector, ModelError> {
    check_batch(model, inputs, labels)?;
    let losses: Vec<f64> = (0..inputs.rows())
        .map(|i| {
            let (logp, _) = log_softmax(&forward(model, inputs.row(i)).logits);
            cross_entropy(&labels[i].0, &logp)
        })
        .collect();
    LossVector::new(losses).map_err(|_| ModelError::NonFinite("losses"))
}

fn backward(model: &ModelParams, x: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let arch = &model.architecture;
    let fwd = forward(model, x);
    let (logp, p) = log_softmax(&fwd.logits);
    let loss = cross_entropy(target, &logp);
    // targets sum to one, so dL/dz = p - y
    let dz: Vec<f64> = p.iter().zip(target).map(|(p, y)| p - y).collect();
    let mut grad = vec![0.0; model.params.len()];

    let outer = |grad: &mut [f64], delta: &[f64], input: &[f64]| {
        let d = input.len();
        for (k, &dk) in delta.iter().enumerate() {
            for (g, &xj) in grad[k * d..(k + 1) * d].iter_mut().zip(input) {
                *g = dk * xj;
            }
        }
        if arch.bias {
            grad[delta.len() * d..delta.len() * (d + 1)].copy_from_slice(delta);
        }
    };

    match arch.hidden {
        None => outer(&mut grad, &dz, x),
        Some(h) => {
            let split = h * (arch.input_dim + usize::from(arch.bias));
            let w2 = &model.params[split..];
            outer(&mut grad[split..], &dz, &fwd.hidden);
            let dh: Vec<f64> = (0..h)
                .map(|j| {
                    let back: f64 = dz
                        .iter()
                        .enumerate()
                        .map(|(k, dk)| dk * w2[k * h + j])
                        .sum();
                    back * arch.activation.derivative(fwd.hidden_pre[j], fwd.hidden[j])
                })
                .collect();
            outer(&mut grad[..split], &dh, x);
        }
    }
    (loss, grad)
}

pub fn per_sample_gradients(
    model: &ModelParams,
    inputs: &FeatureMatrix,
    labels: &[SmoothedLabel],
) -> Result<Vec<BatchGradient>, ModelError> {
    Ok(losses_and_gradients(model, inputs, labels)?.1)
}

/// Forward and backward in one pass over the batch.
pub fn losses_and_gradients(
    model: &ModelParams,
    inputs: &FeatureMatrix,
    labels: &[SmoothedLabel],
) -> Result<(LossVector, Vec<BatchGradient>), ModelError> {
    check_batch(model, inputs, labels)?;
    let mut losses = Vec::with_capacity(inputs.rows());
    let mut grads = Vec::with_capacity(inputs.rows());
    for (i, label) in labels.iter().enumerate() {
        let (loss, g) = backward(model, inputs.row(i), &label.0);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("gradients"));
        }
        losses.push(loss);
        grads.push(BatchGradient(g));
    }
    let losses = LossVector::new(losses).map_err(|_| ModelError::NonFinite("losses"))?;
    Ok((losses, grads))
}

/// `sum_i q_i g_i`, accumulated in sample order.
pub fn weighted_direction(
    grads: &[BatchGradient],
    weights: &WeightVector,
    dim: usize,
) -> Result<Vec<f64>, ModelError> {
    if grads.len() != weights.len() {
        return Err(ModelError::Shape(format!(
            "{} gradients for {} weights",
            grads.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.as_slice().iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL || weights.as_slice().iter().any(|&q| q < 0.0) {
        return Err(ModelError::InvalidWeights);
    }
    let mut dir = vec![0.0; dim];
    for (g, &q) in grads.iter().zip(weights.as_slice()) {
        if g.0.len() != dim {
            return Err(ModelError::Shape(
                "gradient length does not match parameters".into(),
            ));
        }
        for (d, gi) in dir.iter_mut().zip(&g.0) {
            *d += q * gi;
        }
    }
    Ok(dir)
}

/// `theta - lr * sum_i q_i g_i`.
pub fn weighted_step(
    model: &ModelParams,
    grads: &[BatchGradient],
    weights: &WeightVector,
    lr: f64,
) -> Result<ModelParams, ModelError> {
    let dir = weighted_direction(grads, weights, model.params.len())?;
    let params: Vec<f64> = model
        .params
        .iter()
        .zip(&dir)
        .map(|(t, d)| t - lr * d)
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(ModelError::NonFinite("updated parameters"));
    }
    Ok(ModelParams {
        architecture: model.architecture,
        params,
    })
}

/// Plain SGD with optional heavy-ball momentum and L2 weight decay.
///
/// With both extras at zero every step is exactly [`weighted_step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(
        &mut self,
        model: &ModelParams,
        grads: &[BatchGradient],
        weights: &WeightVector,
    ) -> Result<ModelParams, ModelError> {
        if self.momentum == 0.0 && self.weight_decay == 0.0 {
            return weighted_step(model, grads, weights, self.lr);
        }
        let mut dir = weighted_direction(grads, weights, model.params.len())?;
        for (d, t) in dir.iter_mut().zip(&model.params) {
            *d += self.weight_decay * t;
        }
        if self.velocity.len() != dir.len() {
            self.velocity = vec![0.0; dir.len()];
        }
        for (v, d) in self.velocity.iter_mut().zip(&dir) {
            *v = self.momentum * *v + d;
        }
        let params: Vec<f64> = model
            .params
            .iter()
            .zip(&self.velocity)
            .map(|(t, v)| t - self.lr * v)
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFinite("updated parameters"));
        }
        Ok(ModelParams {
            architecture: model.architecture,
            params,
        })
    }
}
