//! Small supervised classifiers with explicit gradients: softmax regression
//! and a one-hidden-layer ReLU MLP. Local training follows mini-batch SGD
//! with momentum on mean cross-entropy; the MLP's post-activation hidden
//! layer doubles as the latent space for profile extraction.

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    SoftmaxReg {
        input_dim: usize,
        num_classes: usize,
    },
    Mlp {
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
    },
}

impl Arch {
    pub fn param_count(&self) -> usize {
        match *self {
            Arch::SoftmaxReg {
                input_dim,
                num_classes,
            } => num_classes * input_dim + num_classes,
            Arch::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => hidden_dim * input_dim + hidden_dim + num_classes * hidden_dim + num_classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            Arch::SoftmaxReg { input_dim, .. } | Arch::Mlp { input_dim, .. } => input_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            Arch::SoftmaxReg { num_classes, .. } | Arch::Mlp { num_classes, .. } => num_classes,
        }
    }

    /// Width of the representation fed to the profile extractor.
    pub fn latent_dim(&self) -> usize {
        match *self {
            Arch::SoftmaxReg { input_dim, .. } => input_dim,
            Arch::Mlp { hidden_dim, .. } => hidden_dim,
        }
    }
}

/// Flat parameter vector plus its architecture descriptor; the unit
/// exchanged in aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Arch,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            momentum: 0.9,
            batch_size: 64,
            local_epochs: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning_rate must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

impl ModelParams {
    pub fn zeros(arch: Arch) -> Self {
        ModelParams {
            arch,
            theta: vec![0.0; arch.param_count()],
        }
    }

    /// Fan-based uniform initialization in +-sqrt(6 / (fan_in + fan_out)).
    pub fn init(arch: Arch, rng: &mut impl Rng) -> Self {
        let mut theta = vec![0.0; arch.param_count()];
        match arch {
            Arch::SoftmaxReg {
                input_dim,
                num_classes,
            } => {
                let bound = (6.0 / (input_dim + num_classes) as f64).sqrt();
                for w in theta.iter_mut().take(num_classes * input_dim) {
                    *w = (rng.gen::<f64>() * 2.0 - 1.0) * bound;
                }
            }
            Arch::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => {
                let b1 = (6.0 / (input_dim + hidden_dim) as f64).sqrt();
                let n1 = hidden_dim * input_dim;
                for w in theta.iter_mut().take(n1) {
                    *w = (rng.gen::<f64>() * 2.0 - 1.0) * b1;
                }
                let b2 = (6.0 / (hidden_dim + num_classes) as f64).sqrt();
                let start = n1 + hidden_dim;
                for w in theta.iter_mut().skip(start).take(num_classes * hidden_dim) {
                    *w = (rng.gen::<f64>() * 2.0 - 1.0) * b2;
                }
            }
        }
        ModelParams { arch, theta }
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// Checkpoint encoding: magic, arch tag and dims, then the flat vector
    /// as little-endian f64. Round-trips exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.theta.len());
        out.extend_from_slice(b"FRM1");
        match self.arch {
            Arch::SoftmaxReg {
                input_dim,
                num_classes,
            } => {
                out.extend_from_slice(&0u32.to_le_bytes());
                out.extend_from_slice(&(input_dim as u32).to_le_bytes());
                out.extend_from_slice(&0u32.to_le_bytes());
                out.extend_from_slice(&(num_classes as u32).to_le_bytes());
            }
            Arch::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => {
                out.extend_from_slice(&1u32.to_le_bytes());
                out.extend_from_slice(&(input_dim as u32).to_le_bytes());
                out.extend_from_slice(&(hidden_dim as u32).to_le_bytes());
                out.extend_from_slice(&(num_classes as u32).to_le_bytes());
            }
        }
        for v in &self.theta {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != b"FRM1" {
            return Err(Error::invalid("bad checkpoint header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let arch = match word(4) {
            0 => Arch::SoftmaxReg {
                input_dim: word(8),
                num_classes: word(16),
            },
            1 => Arch::Mlp {
                input_dim: word(8),
                hidden_dim: word(12),
                num_classes: word(16),
            },
            t => return Err(Error::invalid(format!("unknown arch tag {t}"))),
        };
        let expected = arch.param_count();
        let payload = &bytes[20..];
        if payload.len() != expected * 8 {
            return Err(Error::DimensionMismatch {
                expected: expected * 8,
                got: payload.len(),
                context: "checkpoint payload",
            });
        }
        let theta: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ModelParams { arch, theta })
    }
}

/// Parameter layout for the MLP: [W1 (h x z), b1 (h), W2 (u x h), b2 (u)].
/// For softmax regression: [W (u x z), b (u)].
struct MlpView<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn mlp_view(theta: &[f64], z: usize, h: usize, u: usize) -> MlpView<'_> {
    let n1 = h * z;
    MlpView {
        w1: &theta[..n1],
        b1: &theta[n1..n1 + h],
        w2: &theta[n1 + h..n1 + h + u * h],
        b2: &theta[n1 + h + u * h..],
    }
}

/// Logits for one sample; for the MLP also returns hidden activations.
fn forward(params: &ModelParams, x: &[f64]) -> (Vec<f64>, Option<Vec<f64>>) {
    match params.arch {
        Arch::SoftmaxReg {
            input_dim,
            num_classes,
        } => {
            let w = &params.theta[..num_classes * input_dim];
            let b = &params.theta[num_classes * input_dim..];
            let mut logits = b.to_vec();
            for (c, logit) in logits.iter_mut().enumerate() {
                let row = &w[c * input_dim..(c + 1) * input_dim];
                *logit += row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
            }
            (logits, None)
        }
        Arch::Mlp {
            input_dim,
            hidden_dim,
            num_classes,
        } => {
            let v = mlp_view(&params.theta, input_dim, hidden_dim, num_classes);
            let mut hidden = v.b1.to_vec();
            for (j, hj) in hidden.iter_mut().enumerate() {
                let row = &v.w1[j * input_dim..(j + 1) * input_dim];
                *hj += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                *hj = hj.max(0.0);
            }
            let mut logits = v.b2.to_vec();
            for (c, logit) in logits.iter_mut().enumerate() {
                let row = &v.w2[c * hidden_dim..(c + 1) * hidden_dim];
                *logit += row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
            }
            (logits, Some(hidden))
        }
    }
}

/// Softmax probabilities, shifted for stability.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Cross-entropy of one sample; NaN probabilities propagate instead of
/// being clamped, so divergence is detectable upstream.
fn sample_loss(prob: f64) -> f64 {
    if prob.is_finite() {
        -prob.max(1e-300).ln()
    } else {
        f64::NAN
    }
}

/// Cross-entropy loss of one sample and the gradient accumulated into
/// `grad` (same layout as theta).
fn backward_sample(params: &ModelParams, x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
    let (logits, hidden) = forward(params, x);
    let probs = softmax(&logits);
    let loss = sample_loss(probs[y]);

    match params.arch {
        Arch::SoftmaxReg {
            input_dim,
            num_classes,
        } => {
            for c in 0..num_classes {
                let d = probs[c] - if c == y { 1.0 } else { 0.0 };
                let row = &mut grad[c * input_dim..(c + 1) * input_dim];
                for (g, xv) in row.iter_mut().zip(x) {
                    *g += d * xv;
                }
                grad[num_classes * input_dim + c] += d;
            }
        }
        Arch::Mlp {
            input_dim,
            hidden_dim,
            num_classes,
        } => {
            let hidden = hidden.unwrap();
            let n1 = hidden_dim * input_dim;
            let w2_off = n1 + hidden_dim;
            let b2_off = w2_off + num_classes * hidden_dim;
            let mut dhidden = vec![0.0; hidden_dim];
            {
                let w2 = &params.theta[w2_off..b2_off];
                for c in 0..num_classes {
                    let d = probs[c] - if c == y { 1.0 } else { 0.0 };
                    for j in 0..hidden_dim {
                        grad[w2_off + c * hidden_dim + j] += d * hidden[j];
                        dhidden[j] += d * w2[c * hidden_dim + j];
                    }
                    grad[b2_off + c] += d;
                }
            }
            for j in 0..hidden_dim {
                if hidden[j] > 0.0 {
                    let dj = dhidden[j];
                    let row = &mut grad[j * input_dim..(j + 1) * input_dim];
                    for (g, xv) in row.iter_mut().zip(x) {
                        *g += dj * xv;
                    }
                    grad[n1 + j] += dj;
                }
            }
        }
    }
    loss
}

/// Mean loss and mean gradient over the given sample indices.
pub fn batch_gradient(
    params: &ModelParams,
    features: &Matrix,
    labels: &[usize],
    indices: &[usize],
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.param_count()];
    let mut loss = 0.0;
    for &i in indices {
        loss += backward_sample(params, features.row(i), labels[i], &mut grad);
    }
    let n = indices.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// `local_epochs` passes of mini-batch SGD with momentum on cross-entropy.
/// The input parameters are untouched; velocity starts at zero each call.
pub fn local_update(
    params: &ModelParams,
    data: &ClientDataset,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<ModelParams> {
    cfg.validate()?;
    check_arch(params, data)?;
    let n = data.features.rows();
    if n == 0 {
        return Err(Error::EmptyInput("training data"));
    }

    let mut theta = params.theta.clone();
    let mut velocity = vec![0.0; theta.len()];
    let mut indices: Vec<usize> = (0..n).collect();

    for _epoch in 0..cfg.local_epochs {
        indices.shuffle(rng);
        for batch in indices.chunks(cfg.batch_size) {
            let current = ModelParams {
                arch: params.arch,
                theta: theta.clone(),
            };
            let (loss, grad) = batch_gradient(&current, &data.features, &data.labels, batch);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    round: data.round,
                    client: data.client_id,
                });
            }
            for ((t, v), g) in theta.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *t -= cfg.learning_rate * *v;
            }
        }
    }
    Ok(ModelParams {
        arch: params.arch,
        theta,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Accuracy (argmax, ties to the lowest class index) and mean loss.
pub fn evaluate(params: &ModelParams, data: &ClientDataset) -> Result<Evaluation> {
    check_arch(params, data)?;
    let n = data.features.rows();
    if n == 0 {
        return Err(Error::EmptyInput("evaluation data"));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..n {
        let (logits, _) = forward(params, data.features.row(i));
        let probs = softmax(&logits);
        let mut best = 0;
        for (c, l) in logits.iter().enumerate() {
            if *l > logits[best] {
                best = c;
            }
        }
        if best == data.labels[i] {
            correct += 1;
        }
        loss += sample_loss(probs[data.labels[i]]);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        mean_loss: loss / n as f64,
    })
}

/// Post-activation hidden representations, one row per sample. Softmax
/// regression has no hidden layer and falls back to the raw features.
pub fn extract_latents(params: &ModelParams, features: &Matrix) -> Result<Matrix> {
    if features.cols() != params.arch.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.arch.input_dim(),
            got: features.cols(),
            context: "latent extraction input",
        });
    }
    match params.arch {
        Arch::SoftmaxReg { .. } => Ok(features.clone()),
        Arch::Mlp { .. } => {
            let mut rows = Vec::with_capacity(features.rows());
            for r in features.iter_rows() {
                let (_, hidden) = forward(params, r);
                rows.push(hidden.unwrap());
            }
            Matrix::from_rows(&rows)
        }
    }
}

/// Communication-size ratio d / |theta| behind the compactness report.
pub fn profile_overhead(params: &ModelParams, profile_dim: usize) -> f64 {
    profile_dim as f64 / params.param_count() as f64
}

fn check_arch(params: &ModelParams, data: &ClientDataset) -> Result<()> {
    if data.features.cols() != params.arch.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.arch.input_dim(),
            got: data.features.cols(),
            context: "model input width",
        });
    }
    if let Some(&max) = data.labels.iter().max() {
        if max >= params.arch.num_classes() {
            return Err(Error::invalid(format!(
                "label {max} outside [0, {})",
                params.arch.num_classes()
            )));
        }
    }
    Ok(())
}
