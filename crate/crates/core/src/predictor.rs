//! Small binary classifiers with hand-written backpropagation.
//!
//! Parameters live in one flat vector. For every layer, in order, the weight
//! matrix (`out x in`, row-major) is followed by the bias vector. The last
//! layer always has a single output: the logit. The loss is binary
//! cross-entropy on that logit.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
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
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
}

impl Default for ModelKind {
    fn default() -> Self {
        ModelKind::Linear
    }
}

impl ModelKind {
    fn hidden(&self) -> &[usize] {
        match self {
            ModelKind::Linear => &[],
            ModelKind::Mlp { hidden, .. } => hidden,
        }
    }

    fn activation(&self) -> Activation {
        match self {
            ModelKind::Linear => Activation::Relu,
            ModelKind::Mlp { activation, .. } => *activation,
        }
    }

    fn validate(&self) -> Result<(), PredictorError> {
        if let ModelKind::Mlp { hidden, .. } = self {
            if hidden.is_empty() || hidden.len() > 2 || hidden.contains(&0) {
                return Err(PredictorError::InvalidArchitecture(format!(
                    "mlp needs one or two nonzero hidden sizes, got {hidden:?}"
                )));
            }
        }
        Ok(())
    }

    /// Layer widths from input to the single logit.
    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend_from_slice(self.hidden());
        w.push(1);
        w
    }

    pub fn param_count(&self, input_dim: usize) -> usize {
        self.widths(input_dim)
            .windows(2)
            .map(|p| p[0] * p[1] + p[1])
            .sum()
    }
}

/// Architecture plus flat weights. Serializes to JSON as
/// `{"kind": ..., "input_dim": d, "weights": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub input_dim: usize,
    pub weights: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(kind: ModelKind, input_dim: usize) -> Result<Self, PredictorError> {
        kind.validate()?;
        let n = kind.param_count(input_dim);
        Ok(Self {
            kind,
            input_dim,
            weights: vec![0.0; n],
        })
    }

    /// Weights uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`,
    /// biases zero.
    pub fn init<R: Rng>(kind: ModelKind, input_dim: usize, rng: &mut R) -> Result<Self, PredictorError> {
        let mut p = Self::zeros(kind, input_dim)?;
        let widths = p.kind.widths(input_dim);
        let mut off = 0;
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut p.weights[off..off + fan_in * fan_out] {
                *w = rng.random_range(-a..=a);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PredictorError> {
        self.kind.validate()?;
        let want = self.kind.param_count(self.input_dim);
        if self.weights.len() != want {
            return Err(PredictorError::ShapeMismatch(format!(
                "{} weights for an architecture needing {want}",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(PredictorError::ShapeMismatch("non-finite weight".into()));
        }
        Ok(())
    }
}

/// Per-sample losses and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

impl LossBatch {
    fn new(per_sample: Vec<f64>) -> Self {
        let mean = if per_sample.is_empty() {
            0.0
        } else {
            per_sample.iter().sum::<f64>() / per_sample.len() as f64
        };
        Self { per_sample, mean }
    }
}

/// `softplus(z) - y z`, stable for large `|z|`.
pub fn bce_with_logit(z: f64, y: u8) -> f64 {
    z.max(0.0) - f64::from(y) * z + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_shapes(params: &ModelParams, features: &Matrix, labels: Option<&[u8]>) -> Result<(), PredictorError> {
    params.validate()?;
    if features.cols() != params.input_dim {
        return Err(PredictorError::ShapeMismatch(format!(
            "features have {} columns, model expects {}",
            features.cols(),
            params.input_dim
        )));
    }
    if let Some(y) = labels {
        if y.len() != features.rows() {
            return Err(PredictorError::ShapeMismatch(format!(
                "{} labels for {} rows",
                y.len(),
                features.rows()
            )));
        }
        if y.iter().any(|v| *v > 1) {
            return Err(PredictorError::ShapeMismatch("labels must be 0 or 1".into()));
        }
    }
    Ok(())
}

/// Scratch buffers for one forward/backward pass through the network.
struct Workspace {
    widths: Vec<usize>,
    /// Parameter offset of each layer's weight block.
    offsets: Vec<usize>,
    /// Pre-activations per hidden layer.
    pre: Vec<Vec<f64>>,
    /// Activations per layer; `act[0]` is the input.
    act: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(params: &ModelParams) -> Self {
        let widths = params.kind.widths(params.input_dim);
        let mut offsets = Vec::new();
        let mut off = 0;
        for p in widths.windows(2) {
            offsets.push(off);
            off += p[0] * p[1] + p[1];
        }
        let act = widths.iter().map(|w| vec![0.0; *w]).collect();
        let pre = widths.iter().map(|w| vec![0.0; *w]).collect();
        let delta = widths.iter().map(|w| vec![0.0; *w]).collect();
        Self {
            widths,
            offsets,
            pre,
            act,
            delta,
        }
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn logit(&mut self, w: &[f64], x: &[f64], activation: Activation) -> f64 {
        self.act[0].copy_from_slice(x);
        let layers = self.layers();
        for l in 0..layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = self.offsets[l];
            let bias = &w[off + n_in * n_out..off + n_in * n_out + n_out];
            for o in 0..n_out {
                let row = &w[off + o * n_in..off + (o + 1) * n_in];
                let z = bias[o] + row.iter().zip(&self.act[l]).map(|(a, b)| a * b).sum::<f64>();
                self.pre[l + 1][o] = z;
                self.act[l + 1][o] = if l + 1 == layers { z } else { activation.apply(z) };
            }
        }
        self.act[layers][0]
    }

    /// Accumulate `scale * d logit / d w` into `grad`, after [`Self::logit`].
    fn backward(&mut self, w: &[f64], scale: f64, activation: Activation, grad: &mut [f64]) {
        let layers = self.layers();
        self.delta[layers][0] = scale;
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = self.offsets[l];
            for o in 0..n_out {
                let d = self.delta[l + 1][o];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (gi, a) in g.iter_mut().zip(&self.act[l]) {
                    *gi += d * a;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                for i in 0..n_in {
                    let mut s = 0.0;
                    for o in 0..n_out {
                        s += self.delta[l + 1][o] * w[off + o * n_in + i];
                    }
                    self.delta[l][i] = s * activation.derivative(self.pre[l][i], self.act[l][i]);
                }
            }
        }
    }
}

/// Raw logits for every row.
pub fn logits(params: &ModelParams, features: &Matrix) -> Result<Vec<f64>, PredictorError> {
    check_shapes(params, features, None)?;
    let mut ws = Workspace::new(params);
    let act = params.kind.activation();
    Ok((0..features.rows())
        .map(|i| ws.logit(&params.weights, features.row(i), act))
        .collect())
}

pub fn forward_loss(params: &ModelParams, features: &Matrix, labels: &[u8]) -> Result<LossBatch, PredictorError> {
    check_shapes(params, features, Some(labels))?;
    let z = logits(params, features)?;
    Ok(LossBatch::new(
        z.iter().zip(labels).map(|(z, y)| bce_with_logit(*z, *y)).collect(),
    ))
}

/// Predicted class `1{logit >= 0}`.
pub fn predict(params: &ModelParams, features: &Matrix) -> Result<Vec<u8>, PredictorError> {
    Ok(logits(params, features)?
        .into_iter()
        .map(|z| u8::from(z >= 0.0))
        .collect())
}

/// Gradient of `sum_i s_i l_i(w) + (weight_decay / 2) |w|^2` together with the
/// per-sample losses at `w`.
pub fn loss_and_weighted_grad(
    params: &ModelParams,
    features: &Matrix,
    labels: &[u8],
    sample_weights: &[f64],
    weight_decay: f64,
) -> Result<(LossBatch, Vec<f64>), PredictorError> {
    check_shapes(params, features, Some(labels))?;
    if sample_weights.len() != labels.len() {
        return Err(PredictorError::ShapeMismatch(format!(
            "{} sample weights for {} rows",
            sample_weights.len(),
            labels.len()
        )));
    }
    let w = &params.weights;
    let act = params.kind.activation();
    let mut ws = Workspace::new(params);
    let mut grad = vec![0.0; w.len()];
    let mut losses = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        let z = ws.logit(w, features.row(i), act);
        losses.push(bce_with_logit(z, labels[i]));
        let s = sample_weights[i];
        if s != 0.0 {
            let dz = sigmoid(z) - f64::from(labels[i]);
            ws.backward(w, s * dz, act, &mut grad);
        }
    }
    if weight_decay != 0.0 {
        for (g, wi) in grad.iter_mut().zip(w) {
            *g += weight_decay * wi;
        }
    }
    Ok((LossBatch::new(losses), grad))
}

pub fn weighted_grad(
    params: &ModelParams,
    features: &Matrix,
    labels: &[u8],
    sample_weights: &[f64],
    weight_decay: f64,
) -> Result<Vec<f64>, PredictorError> {
    loss_and_weighted_grad(params, features, labels, sample_weights, weight_decay).map(|(_, g)| g)
}

/// Weighted objective whose gradient [`weighted_grad`] computes.
pub fn weighted_objective(
    params: &ModelParams,
    features: &Matrix,
    labels: &[u8],
    sample_weights: &[f64],
    weight_decay: f64,
) -> Result<f64, PredictorError> {
    let lb = forward_loss(params, features, labels)?;
    let data: f64 = lb.per_sample.iter().zip(sample_weights).map(|(l, s)| l * s).sum();
    let ridge: f64 = params.weights.iter().map(|w| w * w).sum::<f64>() * weight_decay / 2.0;
    Ok(data + ridge)
}

/// Central-difference estimate of the weighted objective's gradient.
pub fn finite_diff_grad(
    params: &ModelParams,
    features: &Matrix,
    labels: &[u8],
    sample_weights: &[f64],
    weight_decay: f64,
    step: f64,
) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = params.clone();
    (0..params.weights.len())
        .map(|k| {
            let w0 = params.weights[k];
            probe.weights[k] = w0 + step;
            let up = weighted_objective(&probe, features, labels, sample_weights, weight_decay)
                .expect("shapes checked by caller");
            probe.weights[k] = w0 - step;
            let down = weighted_objective(&probe, features, labels, sample_weights, weight_decay)
                .expect("shapes checked by caller");
            probe.weights[k] = w0;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn sgd_step(params: &ModelParams, gradient: &[f64], eta_w: f64) -> ModelParams {
    assert_eq!(params.weights.len(), gradient.len(), "gradient length mismatch");
    ModelParams {
        weights: params
            .weights
            .iter()
            .zip(gradient)
            .map(|(w, g)| w - eta_w * g)
            .collect(),
        ..params.clone()
    }
}

/// `|a - b| / max(|a| + |b|, floor)` over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-8)
}
