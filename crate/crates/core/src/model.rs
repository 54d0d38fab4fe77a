//! Small differentiable classifiers with exact analytic gradients.
//!
//! Two kinds: a linear softmax classifier and a one-hidden-layer MLP (relu or
//! tanh). Training optimizes a clipped, rescaled cross-entropy
//! `min(CE, clip)/clip ∈ [0, 1]`; bounds and gaps are evaluated with the 0-1
//! loss. Parameters live in one flat vector so optimizer steps and gradient
//! probes are plain vector arithmetic.
//!
//! Layouts (row-major):
//! - linear: `[W (classes×input), b (classes)]`
//! - mlp: `[W1 (hidden×input), b1 (hidden), W2 (classes×hidden), b2 (classes)]`

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::tasks::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp { hidden_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub classes: usize,
    pub activation: Activation,
    /// Cap on the per-sample cross-entropy before rescaling; keeps the
    /// training loss inside [0, 1].
    pub surrogate_clip: f64,
}

pub const DEFAULT_SURROGATE_CLIP: f64 = 4.0;

impl ModelSpec {
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Linear,
            input_dim,
            classes,
            activation: Activation::Relu,
            surrogate_clip: DEFAULT_SURROGATE_CLIP,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, classes: usize, activation: Activation) -> Self {
        Self {
            kind: ModelKind::Mlp { hidden_dim },
            input_dim,
            classes,
            activation,
            surrogate_clip: DEFAULT_SURROGATE_CLIP,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Linear => self.classes * self.input_dim + self.classes,
            ModelKind::Mlp { hidden_dim } => {
                hidden_dim * self.input_dim + hidden_dim + self.classes * hidden_dim + self.classes
            }
        }
    }

    fn assert_valid(&self) {
        assert!(self.input_dim >= 1 && self.classes >= 1);
        if let ModelKind::Mlp { hidden_dim } = self.kind {
            assert!(hidden_dim >= 1);
        }
        assert!(self.surrogate_clip > 0.0);
    }
}

/// Flat parameter vector tied to its layout spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub spec: ModelSpec,
    pub theta: Vec<f64>,
}

impl Params {
    pub fn all_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }
}

/// Kaiming-uniform fan-in initialization for weight blocks, zero biases.
pub fn init_params(spec: &ModelSpec, stream: &RngStream) -> Params {
    spec.assert_valid();
    let mut rng = stream.rng();
    let mut theta = vec![0.0f64; spec.param_count()];
    let mut fill = |theta: &mut [f64], range: std::ops::Range<usize>, fan_in: usize| {
        let bound = (6.0 / fan_in as f64).sqrt();
        for i in range {
            theta[i] = rng.random_range(-bound..bound);
        }
    };
    match spec.kind {
        ModelKind::Linear => {
            fill(&mut theta, 0..spec.classes * spec.input_dim, spec.input_dim);
        }
        ModelKind::Mlp { hidden_dim } => {
            let w1 = hidden_dim * spec.input_dim;
            fill(&mut theta, 0..w1, spec.input_dim);
            let w2_start = w1 + hidden_dim;
            fill(&mut theta, w2_start..w2_start + spec.classes * hidden_dim, hidden_dim);
        }
    }
    Params {
        spec: spec.clone(),
        theta,
    }
}

fn activate(x: f64, act: Activation) -> f64 {
    match act {
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
    }
}

fn activate_grad(pre: f64, act: Activation) -> f64 {
    match act {
        Activation::Relu => {
            if pre > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => {
            let t = pre.tanh();
            1.0 - t * t
        }
    }
}

/// Logits for one feature vector. Panics on dimension mismatch.
pub fn forward(params: &Params, features: &[f64]) -> Vec<f64> {
    let spec = &params.spec;
    assert_eq!(features.len(), spec.input_dim, "feature dimension mismatch");
    let theta = &params.theta;
    match spec.kind {
        ModelKind::Linear => {
            let b = spec.classes * spec.input_dim;
            (0..spec.classes)
                .map(|c| {
                    let row = &theta[c * spec.input_dim..(c + 1) * spec.input_dim];
                    row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + theta[b + c]
                })
                .collect()
        }
        ModelKind::Mlp { hidden_dim } => {
            let (w1, b1, w2, b2) = mlp_offsets(spec, hidden_dim);
            let mut hidden = vec![0.0f64; hidden_dim];
            for h in 0..hidden_dim {
                let row = &theta[w1 + h * spec.input_dim..w1 + (h + 1) * spec.input_dim];
                let pre =
                    row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + theta[b1 + h];
                hidden[h] = activate(pre, spec.activation);
            }
            (0..spec.classes)
                .map(|c| {
                    let row = &theta[w2 + c * hidden_dim..w2 + (c + 1) * hidden_dim];
                    row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + theta[b2 + c]
                })
                .collect()
        }
    }
}

fn mlp_offsets(spec: &ModelSpec, hidden_dim: usize) -> (usize, usize, usize, usize) {
    let w1 = 0;
    let b1 = hidden_dim * spec.input_dim;
    let w2 = b1 + hidden_dim;
    let b2 = w2 + spec.classes * hidden_dim;
    (w1, b1, w2, b2)
}

/// Predicted class: argmax over logits, ties resolved toward the larger
/// class index (relevant at zero-initialized linear models).
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in logits.iter().enumerate() {
        if v >= logits[best] {
            best = c;
        }
    }
    best
}

fn log_softmax(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits[label] - log_sum
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    ZeroOne,
    Surrogate,
}

/// Per-sample loss in [0, 1]: the 0-1 loss for bound evaluation, or the
/// clipped rescaled cross-entropy for training.
pub fn loss_eval(params: &Params, sample: &Sample, kind: LossKind) -> f64 {
    let logits = forward(params, &sample.features);
    match kind {
        LossKind::ZeroOne => f64::from(predict(&logits) != sample.label),
        LossKind::Surrogate => {
            let ce = -log_softmax(&logits, sample.label);
            ce.min(params.spec.surrogate_clip) / params.spec.surrogate_clip
        }
    }
}

/// Negative mean surrogate gradient `G = −(1/|B|)·Σ ∇ℓ`, so the ascent-form
/// update is `W ← W + ηG + N`. Exact backprop; panics on an empty batch.
pub fn grad_batch(params: &Params, batch: &[&Sample]) -> Vec<f64> {
    assert!(!batch.is_empty(), "empty batch");
    let spec = &params.spec;
    let theta = &params.theta;
    let clip = spec.surrogate_clip;
    let mut acc = vec![0.0f64; theta.len()];
    for sample in batch {
        let x = &sample.features;
        assert_eq!(x.len(), spec.input_dim, "feature dimension mismatch");
        match spec.kind {
            ModelKind::Linear => {
                let logits = forward(params, x);
                let ce = -log_softmax(&logits, sample.label);
                if ce >= clip {
                    continue;
                }
                let probs = softmax(&logits);
                let b = spec.classes * spec.input_dim;
                for c in 0..spec.classes {
                    let dl = (probs[c] - f64::from(c == sample.label)) / clip;
                    let row = &mut acc[c * spec.input_dim..(c + 1) * spec.input_dim];
                    for (slot, &xi) in row.iter_mut().zip(x) {
                        *slot += dl * xi;
                    }
                    acc[b + c] += dl;
                }
            }
            ModelKind::Mlp { hidden_dim } => {
                let (w1, b1, w2, b2) = mlp_offsets(spec, hidden_dim);
                let mut pre = vec![0.0f64; hidden_dim];
                let mut hidden = vec![0.0f64; hidden_dim];
                for h in 0..hidden_dim {
                    let row = &theta[w1 + h * spec.input_dim..w1 + (h + 1) * spec.input_dim];
                    pre[h] =
                        row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + theta[b1 + h];
                    hidden[h] = activate(pre[h], spec.activation);
                }
                let logits: Vec<f64> = (0..spec.classes)
                    .map(|c| {
                        let row = &theta[w2 + c * hidden_dim..w2 + (c + 1) * hidden_dim];
                        row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + theta[b2 + c]
                    })
                    .collect();
                let ce = -log_softmax(&logits, sample.label);
                if ce >= clip {
                    continue;
                }
                let probs = softmax(&logits);
                let mut d_hidden = vec![0.0f64; hidden_dim];
                for c in 0..spec.classes {
                    let dl = (probs[c] - f64::from(c == sample.label)) / clip;
                    for h in 0..hidden_dim {
                        acc[w2 + c * hidden_dim + h] += dl * hidden[h];
                        d_hidden[h] += dl * theta[w2 + c * hidden_dim + h];
                    }
                    acc[b2 + c] += dl;
                }
                for h in 0..hidden_dim {
                    let dp = d_hidden[h] * activate_grad(pre[h], spec.activation);
                    for (i, &xi) in x.iter().enumerate() {
                        acc[w1 + h * spec.input_dim + i] += dp * xi;
                    }
                    acc[b1 + h] += dp;
                }
            }
        }
    }
    let scale = -1.0 / batch.len() as f64;
    for v in acc.iter_mut() {
        *v *= scale;
    }
    acc
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Result of a central-difference check of the analytic batch gradient.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// max over coordinates of |analytic − central| / (|analytic| + 1e−8)
    pub max_rel: f64,
    /// max over coordinates of |analytic − central|
    pub max_abs: f64,
}

/// Central-difference check of the mean surrogate loss gradient.
pub fn fd_gradient_check(params: &Params, batch: &[&Sample], eps: f64) -> GradCheck {
    assert!((1e-6..=1e-3).contains(&eps), "eps outside [1e-6, 1e-3]");
    let analytic: Vec<f64> = grad_batch(params, batch).iter().map(|g| -g).collect();
    let mean_loss = |p: &Params| -> f64 {
        batch
            .iter()
            .map(|s| loss_eval(p, s, LossKind::Surrogate))
            .sum::<f64>()
            / batch.len() as f64
    };
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut probe = params.clone();
    for i in 0..params.theta.len() {
        let orig = probe.theta[i];
        probe.theta[i] = orig + eps;
        let up = mean_loss(&probe);
        probe.theta[i] = orig - eps;
        let down = mean_loss(&probe);
        probe.theta[i] = orig;
        let central = (up - down) / (2.0 * eps);
        let abs = (analytic[i] - central).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / (analytic[i].abs() + 1e-8));
    }
    GradCheck { max_rel, max_abs }
}

// ---------------------------------------------------------------------------
// Params serialization: JSON spec header line + flat little-endian f64 body
// ---------------------------------------------------------------------------

pub fn write_params(path: &Path, params: &Params) -> std::io::Result<()> {
    let mut file = std::fs::File::create(path)?;
    let header = serde_json::to_string(&params.spec).expect("spec serializes");
    file.write_all(header.as_bytes())?;
    file.write_all(b"\n")?;
    for v in &params.theta {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_params(path: &Path) -> std::io::Result<Params> {
    let bytes = std::fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "missing header"))?;
    let spec: ModelSpec = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let body = &bytes[newline + 1..];
    if body.len() % 8 != 0 || body.len() / 8 != spec.param_count() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "parameter payload length mismatch",
        ));
    }
    let theta = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Params { spec, theta })
}

/// Read-only view of a base64 payload as parameters (run-record format).
pub fn params_to_base64(params: &Params) -> String {
    crate::tasks::encode_f64s(&params.theta)
}

pub fn params_from_base64(spec: &ModelSpec, encoded: &str) -> Result<Params, String> {
    let theta = crate::tasks::decode_f64s(encoded)?;
    if theta.len() != spec.param_count() {
        return Err(format!(
            "decoded {} parameters, spec wants {}",
            theta.len(),
            spec.param_count()
        ));
    }
    Ok(Params {
        spec: spec.clone(),
        theta,
    })
}
