//! Linear softmax probe over fixed embeddings: training, inference,
//! evaluation, cross-validation and augmented-set merging.

mod dataset;
mod metrics;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::error::{Error, Result};
use crate::model::hash_parts;

pub use dataset::{
    cross_validate, dataset_samples, merge_for_training, train_on_dataset, CrossValidationReport, MergeFraction,
    MergedTrainingSet, MeanMetrics, TrainOutcome,
};
pub use metrics::{evaluate, format_percent, parse_percent, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    /// Decoupled weight decay (AdamW only).
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 25,
            optimizer: Optimizer::Adamw,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(name, format!("{v} must be positive")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("epsilon", self.epsilon)?;
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be ≥ 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("weight_decay", "must be non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(name, format!("{b} not in [0, 1)")));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::validation("train_fraction", format!("{} not in (0, 1)", self.train_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochPoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    /// `num_classes` rows of feature weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub class_names: Vec<String>,
    pub train_config: TrainConfig,
    pub training_curve: Vec<EpochPoint>,
    /// Embedder that produced the training features, if known.
    pub embedder: Option<String>,
}

impl ModelArtifact {
    pub fn zeros(class_names: Vec<String>, dim: usize, config: TrainConfig) -> Self {
        ModelArtifact {
            weights: vec![vec![0.0; dim]; class_names.len()],
            bias: vec![0.0; class_names.len()],
            class_names,
            train_config: config,
            training_curve: Vec::new(),
            embedder: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_names.len();
        let mut names = self.class_names.clone();
        names.sort();
        names.dedup();
        if names.len() != k {
            return Err(Error::validation("class_names", "must be distinct"));
        }
        if self.weights.len() != k || self.bias.len() != k {
            return Err(Error::validation("weights", "row count must equal the number of classes"));
        }
        let dim = self.dim();
        if self.weights.iter().any(|r| r.len() != dim) {
            return Err(Error::validation("weights", "rows must have equal length"));
        }
        if self.weights.iter().flatten().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::validation("weights", "must be finite"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        canonical::to_string(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::manifest::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: ModelArtifact =
            serde_json::from_str(&text).map_err(|e| Error::validation("model.json", e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}

/// Training progress reported once per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    /// Cross-validation fold, if any.
    pub fold: Option<usize>,
    pub epoch: usize,
    pub epochs: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

pub trait ProgressSink: Send + Sync {
    fn emit(&self, event: TrainEvent);
}

/// Discards all events.
pub struct NullSink;

impl ProgressSink for NullSink {
    fn emit(&self, _: TrainEvent) {}
}

impl<F: Fn(TrainEvent) + Send + Sync> ProgressSink for F {
    fn emit(&self, event: TrainEvent) {
        self(event)
    }
}

/// Extension point for training real backbones out of process. Implementations
/// report progress through the same sink protocol as the in-process probe.
pub trait ExternalTrainer: Send + Sync {
    fn train(&self, dataset_dir: &Path, config: &TrainConfig, sink: &dyn ProgressSink) -> Result<ModelArtifact>;
    fn identifier(&self) -> String;
}

/// Feature rows with integer labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Samples {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub label: usize,
}

fn logits(weights: &[Vec<f64>], bias: &[f64], x: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .zip(bias)
        .map(|(w, b)| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the smaller index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Gradient of the mean cross-entropy with respect to weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Mean softmax cross-entropy over `(features, labels)` and its gradient.
pub fn loss_and_gradient(weights: &[Vec<f64>], bias: &[f64], features: &[&[f64]], labels: &[usize]) -> (f64, Gradient) {
    let k = bias.len();
    let dim = weights.first().map_or(0, Vec::len);
    let mut grad = Gradient {
        weights: vec![vec![0.0; dim]; k],
        bias: vec![0.0; k],
    };
    let n = labels.len().max(1) as f64;
    let mut loss = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        let z = logits(weights, bias, x);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += log_sum - z[y];
        for c in 0..k {
            let p = (z[c] - log_sum).exp();
            let r = (p - if c == y { 1.0 } else { 0.0 }) / n;
            grad.bias[c] += r;
            for (g, xv) in grad.weights[c].iter_mut().zip(x.iter()) {
                *g += r * xv;
            }
        }
    }
    (loss / n, grad)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Parameters flattened as `[w_0.., w_1.., …, bias..]`.
fn flatten(weights: &[Vec<f64>], bias: &[f64]) -> Vec<f64> {
    weights.iter().flatten().chain(bias).copied().collect()
}

fn step(params: &mut [f64], grad: &[f64], config: &TrainConfig, adam: &mut AdamState) {
    let lr = config.learning_rate;
    match config.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Optimizer::Adamw => {
            adam.t += 1;
            let (b1, b2) = (config.beta1, config.beta2);
            let c1 = 1.0 - b1.powi(adam.t);
            let c2 = 1.0 - b2.powi(adam.t);
            for i in 0..params.len() {
                adam.m[i] = b1 * adam.m[i] + (1.0 - b1) * grad[i];
                adam.v[i] = b2 * adam.v[i] + (1.0 - b2) * grad[i] * grad[i];
                let m_hat = adam.m[i] / c1;
                let v_hat = adam.v[i] / c2;
                params[i] -= lr * (m_hat / (v_hat.sqrt() + config.epsilon) + config.weight_decay * params[i]);
            }
        }
    }
}

fn unflatten(params: &[f64], model: &mut ModelArtifact) {
    let dim = model.dim();
    for (c, row) in model.weights.iter_mut().enumerate() {
        row.copy_from_slice(&params[c * dim..(c + 1) * dim]);
    }
    let k = model.bias.len();
    model.bias.copy_from_slice(&params[params.len() - k..]);
}

fn accuracy(model: &ModelArtifact, samples: &Samples) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .features
        .iter()
        .zip(&samples.labels)
        .filter(|(x, &y)| argmax(&logits(&model.weights, &model.bias, x)) == y)
        .count();
    correct as f64 / samples.len() as f64
}

fn check_samples(samples: &Samples, num_classes: usize, dim: usize, what: &str) -> Result<()> {
    if samples.features.len() != samples.labels.len() {
        return Err(Error::validation(what, "feature and label counts differ"));
    }
    if let Some(row) = samples.features.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: row.len(),
        });
    }
    if let Some(&y) = samples.labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::validation(what, format!("label {y} out of range for {num_classes} classes")));
    }
    Ok(())
}

/// Trains a zero-initialised probe with mini-batch descent on softmax
/// cross-entropy. Batches follow a per-epoch shuffle drawn from `config.seed`.
pub fn train_probe(
    train: &Samples,
    validation: Option<&Samples>,
    class_names: Vec<String>,
    config: &TrainConfig,
    fold: Option<usize>,
    sink: &dyn ProgressSink,
) -> Result<ModelArtifact> {
    config.validate()?;
    let k = class_names.len();
    let dim = train.features.first().map_or(0, Vec::len);
    if k < 2 {
        return Err(Error::InsufficientData {
            class: class_names.first().cloned().unwrap_or_default(),
            message: "training needs at least 2 classes".into(),
        });
    }
    if train.len() < k || dim == 0 {
        return Err(Error::InsufficientData {
            class: String::new(),
            message: format!("{} training samples for {k} classes", train.len()),
        });
    }
    check_samples(train, k, dim, "train")?;
    if let Some(v) = validation {
        check_samples(v, k, dim, "validation")?;
    }
    let mut present = train.labels.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::InsufficientData {
            class: class_names[present[0]].clone(),
            message: "training data contains a single class".into(),
        });
    }

    let mut model = ModelArtifact::zeros(class_names, dim, config.clone());
    let mut params = flatten(&model.weights, &model.bias);
    let mut adam = AdamState {
        m: vec![0.0; params.len()],
        v: vec![0.0; params.len()],
        t: 0,
    };
    let mut rng = ChaCha8Rng::from_seed(hash_parts(&[b"train-shuffle", &config.seed.to_le_bytes()]));
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let features: Vec<&[f64]> = batch.iter().map(|&i| train.features[i].as_slice()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grad) = loss_and_gradient(&model.weights, &model.bias, &features, &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            step(&mut params, &flatten(&grad.weights, &grad.bias), config, &mut adam);
            unflatten(&params, &mut model);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        let point = EpochPoint {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: accuracy(&model, train),
            val_accuracy: validation.map(|v| accuracy(&model, v)),
        };
        sink.emit(TrainEvent {
            fold,
            epoch,
            epochs: config.epochs,
            train_loss: point.train_loss,
            train_accuracy: point.train_accuracy,
            val_accuracy: point.val_accuracy,
        });
        model.training_curve.push(point);
    }
    Ok(model)
}

/// Softmax probabilities and argmax label per feature row.
pub fn predict(model: &ModelArtifact, features: &[Vec<f64>]) -> Result<Vec<Prediction>> {
    let dim = model.dim();
    features
        .iter()
        .map(|x| {
            if x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: x.len(),
                });
            }
            let z = logits(&model.weights, &model.bias, x);
            Ok(Prediction {
                label: argmax(&z),
                probabilities: softmax(&z),
            })
        })
        .collect()
}
