//! SGD-with-momentum training, evaluation and the ablation grid.
//!
//! Batches are processed one sequence at a time: gradients of the per-sample
//! cross-entropy are averaged over `batch_size` samples before each update.

mod ablation;

pub use ablation::{
    run_ablation, AblationGrid, AblationReport, CellKey, CellMetrics, CellResult, GapSummary, ReportError,
};

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{derive_seed, load_batch, BatchItem, DataError, Dataset, Split, Window};
use crate::model::{predict, Forward, ModelConfig, ModelError, StamParams, Variant};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Rescales each averaged batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub n: usize,
    pub window: Window,
    /// Architecture; `seq_len` is overridden by `n`.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 16,
            epochs: 60,
            patience: 10,
            clip_norm: Some(1.0),
            seed: 0,
            n: 4,
            window: Window::FromOnset,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { seq_len: self.n, ..self.model.clone() }
    }

    pub fn variant(&self) -> Variant {
        self.model.variant
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return bad(format!("clip norm must be positive, got {:?}", self.clip_norm));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive".into());
        }
        if self.n == 0 {
            return bad("sequence length must be positive".into());
        }
        self.model_config().validate()?;
        Ok(())
    }

    /// Hex SHA-256 of every field that affects the result.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_string().as_bytes()))
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.model_config();
        let channels: Vec<String> = m.backbone_channels.iter().map(|c| c.to_string()).collect();
        write!(
            f,
            "lr={} momentum={} batch={} epochs={} patience={} clip={} seed={} n={} window={} variant={} heads={} proj_dim={} channels={} frame={}x{} classes={} hidden={}",
            self.learning_rate,
            self.momentum,
            self.batch_size,
            self.epochs,
            self.patience,
            self.clip_norm.map_or("none".into(), |c| c.to_string()),
            self.seed,
            self.n,
            self.window,
            m.variant,
            m.heads,
            m.proj_width(),
            channels.join(","),
            m.frame_height,
            m.frame_width,
            m.classes,
            m.classifier_hidden,
        )
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `−log softmax(logits)[label]` as a one-element tensor.
pub fn cross_entropy_loss(logits: &Tensor, label: usize) -> Result<Tensor> {
    if logits.shape().len() != 1 {
        return Err(TrainError::Contract(format!("logits must be rank 1, got {:?}", logits.shape())));
    }
    if label >= logits.numel() {
        return Err(TrainError::Contract(format!("label {label} out of range for {} classes", logits.numel())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let loss = tape.cross_entropy(x, label)?;
    Ok(tape.value(loss).clone())
}

/// One momentum step, returning new parameters and velocities:
/// `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &[Tensor],
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    velocity: &[Tensor],
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::Contract(format!(
            "{} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let mut p_out = params.to_vec();
    let mut v_out = velocity.to_vec();
    for (i, ((p, v), g)) in p_out.iter_mut().zip(&mut v_out).zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(TrainError::Contract(format!(
                "tensor {i}: param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        apply_momentum(p.values_mut(), v.values_mut(), g.values(), lr, momentum);
    }
    Ok((p_out, v_out))
}

fn apply_momentum(p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Accuracy, mean loss and confusion matrix over already-windowed samples.
pub fn evaluate_items(params: &StamParams, items: &[BatchItem]) -> Result<Evaluation> {
    let k = params.config.classes;
    let mut confusion = vec![vec![0; k]; k];
    let mut loss = 0.0;
    let mut correct = 0;
    for item in items {
        if item.label >= k {
            return Err(TrainError::Contract(format!("label {} out of range for {k} classes", item.label)));
        }
        let mut tape = Tape::new();
        let fwd = Forward::run(&mut tape, params, &item.frames, false)?;
        let ce = tape.cross_entropy(fwd.logits, item.label)?;
        loss += tape.value(ce).values()[0];
        let pred = predict(tape.value(fwd.logits).values());
        confusion[item.label][pred] += 1;
        correct += usize::from(pred == item.label);
    }
    let total = items.len().max(1) as f64;
    Ok(Evaluation { accuracy: correct as f64 / total, mean_loss: loss / total, confusion })
}

/// Evaluates one split under the config's window and length.
pub fn evaluate(params: &StamParams, dataset: &Dataset, split: Split, config: &TrainConfig) -> Result<Evaluation> {
    let items = windowed(dataset, split, config)?;
    evaluate_items(params, &items)
}

fn windowed(dataset: &Dataset, split: Split, config: &TrainConfig) -> Result<Vec<BatchItem>> {
    let report = load_batch(dataset, &dataset.ids(split), config.window, config.n);
    for (id, why) in &report.skipped {
        log::warn!("{split}: skipping sequence {id}: {why}");
    }
    if report.items.is_empty() {
        return Err(TrainError::Config(format!("{split} split has no usable sequences for n={}", config.n)));
    }
    Ok(report.items)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean loss over the epoch's updates.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation accuracy.
    pub params: StamParams,
    /// Mean training loss of the initial parameters.
    pub initial_loss: f64,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    /// Tab-separated per-epoch trace with a header line.
    pub fn metrics_table(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\ttrain_accuracy\tval_loss\tval_accuracy\n");
        out.push_str(&format!("0\t{}\t\t\t\n", self.initial_loss));
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
            ));
        }
        out
    }

    pub fn best(&self) -> &EpochMetrics {
        &self.epochs[self.best_epoch - 1]
    }
}

/// Trains from a fresh initialization seeded by `config.seed`, keeping the
/// parameters with the best validation accuracy (lower validation loss
/// breaks ties).
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let train_items = windowed(dataset, Split::Train, config)?;
    let val_items = windowed(dataset, Split::Val, config)?;
    let model_cfg = config.model_config();
    if let Some(bad) = train_items.iter().chain(&val_items).find(|i| i.label >= model_cfg.classes) {
        return Err(TrainError::Config(format!(
            "label {} exceeds the model's {} classes",
            bad.label, model_cfg.classes
        )));
    }

    let mut params = StamParams::init(&model_cfg, config.seed)?;
    let initial_loss = evaluate_items(&params, &train_items)?.mean_loss;
    let mut velocity: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut grad_sum: Vec<Vec<f64>> = velocity.clone();

    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, f64, usize, StamParams)> = None;
    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(config.batch_size) {
            for g in &mut grad_sum {
                g.fill(0.0);
            }
            for &i in batch {
                let item = &train_items[i];
                let mut tape = Tape::new();
                let fwd = Forward::run(&mut tape, &params, &item.frames, true)?;
                let loss = tape.cross_entropy(fwd.logits, item.label)?;
                loss_sum += tape.value(loss).values()[0];
                correct += usize::from(predict(tape.value(fwd.logits).values()) == item.label);
                tape.backward(loss)?;
                for (acc, &v) in grad_sum.iter_mut().zip(&fwd.params.all) {
                    if let Some(g) = tape.grad(v) {
                        acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
                    }
                }
            }
            let mut scale = 1.0 / batch.len() as f64;
            if let Some(clip) = config.clip_norm {
                let norm = scale * grad_sum.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    scale *= clip / norm;
                }
            }
            for ((p, v), g) in params.tensors_mut().into_iter().zip(&mut velocity).zip(&mut grad_sum) {
                g.iter_mut().for_each(|g| *g *= scale);
                apply_momentum(p.values_mut(), v, g, config.learning_rate, config.momentum);
            }
        }
        if params.tensors().iter().any(|t| !t.all_finite()) {
            return Err(TrainError::Contract(format!("parameters diverged in epoch {epoch}")));
        }
        let val = evaluate_items(&params, &val_items)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_items.len() as f64,
            train_accuracy: correct as f64 / train_items.len() as f64,
            val_loss: val.mean_loss,
            val_accuracy: val.accuracy,
        };
        log::debug!("epoch {epoch}: {metrics:?}");
        epochs.push(metrics);
        let improved = match &best {
            None => true,
            Some((acc, loss, _, _)) => val.accuracy > *acc || (val.accuracy == *acc && val.mean_loss < *loss),
        };
        if improved {
            best = Some((val.accuracy, val.mean_loss, epoch, params.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.2) >= config.patience {
            break;
        }
    }
    let (_, _, best_epoch, params) = best.expect("at least one epoch runs");
    Ok(TrainOutcome { params, initial_loss, epochs, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_tracks_fields() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), TrainConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { learning_rate: f64::NAN, ..Default::default() },
            TrainConfig { n: 0, ..Default::default() },
        ] {
            assert!(matches!(c.validate(), Err(TrainError::Config(_) | TrainError::Model(_))), "{c:?}");
        }
    }
}
