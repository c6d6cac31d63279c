//! Mini-batch SGD training and sharded evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PatchSet;
use crate::metrics::{ConfusionMatrix, MetricsError};
use crate::model::{batch_pyramids, ModelError, Network};
use crate::tensor::{Graph, Mode, Sgd, TensorError};

/// Evaluation batches are fixed-size so results never depend on the worker count.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("no samples to {0}")]
    Empty(&'static str),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("patch set has {found} classes, network expects {expected}")]
    ClassCount { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 150, learning_rate: 0.01, momentum: 0.9, batch_size: 32, seed: 0, shuffle: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        // Zero is allowed: it turns training into a pure loss probe.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's samples.
    pub loss: f64,
    /// Fraction of training samples classified correctly during the epoch (train mode).
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    /// `epoch,loss,train_acc` rows; floats use their shortest exact representation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_acc\n");
        for e in &self.epochs {
            writeln!(out, "{},{:?},{:?}", e.epoch, e.loss, e.train_accuracy).unwrap();
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_classes(net: &Network, patches: &PatchSet) -> Result<(), TrainError> {
    let expected = net.config().class_count;
    if patches.class_count() != expected {
        return Err(TrainError::ClassCount { expected, found: patches.class_count() });
    }
    Ok(())
}

fn diverged(err: TensorError, epoch: usize, batch: usize) -> TrainError {
    match err {
        TensorError::NonFinite { .. } => TrainError::Diverged { epoch, batch },
        other => other.into(),
    }
}

/// Trains `net` on the patches at `indices`. One RNG, seeded from the config,
/// drives both the epoch shuffles and the dropout masks, so a seed fixes the
/// whole run.
pub fn fit(
    net: &mut Network,
    patches: &PatchSet,
    indices: &[usize],
    config: &TrainConfig,
) -> Result<TrainingHistory, TrainError> {
    config.validate()?;
    check_classes(net, patches)?;
    if indices.is_empty() {
        return Err(TrainError::Empty("train on"));
    }
    let levels = net.config().wavelet_levels;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(net.params(), config.learning_rate, config.momentum)?;
    net.set_mode(Mode::Train);
    let mut order = indices.to_vec();
    let mut history = TrainingHistory::default();
    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch_no = b + 1;
            let (batch, labels) = patches.batch(chunk);
            let pyramids = batch_pyramids(&batch, levels)?;
            let mut g = Graph::new();
            let forward = match net.forward(&mut g, &batch, &pyramids, &mut rng) {
                Err(ModelError::Tensor(e)) => return Err(diverged(e, epoch, batch_no)),
                other => other?,
            };
            let loss = g.softmax_cross_entropy(forward.logits, &labels).map_err(|e| diverged(e, epoch, batch_no))?;
            let classes = net.config().class_count;
            correct +=
                g.value(forward.logits).chunks_exact(classes).zip(&labels).filter(|(row, &l)| argmax(row) == l).count();
            loss_sum += g.value(loss)[0] * chunk.len() as f64;
            g.backward(loss).map_err(|e| diverged(e, epoch, batch_no))?;
            net.zero_grad();
            net.accumulate_grads(&g, &forward)?;
            sgd.step(net.params_mut())?;
            if net.params().iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
                return Err(TrainError::Diverged { epoch, batch: batch_no });
            }
        }
        let n = order.len() as f64;
        history.epochs.push(EpochRecord { epoch, loss: loss_sum / n, train_accuracy: correct as f64 / n });
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    /// Mean cross-entropy over the evaluated samples.
    pub loss: f64,
    /// Predicted class per evaluated sample, in `indices` order.
    pub predictions: Vec<usize>,
}

struct ChunkResult {
    loss_sum: f64,
    predictions: Vec<usize>,
}

fn eval_chunk(net: &Network, patches: &PatchSet, chunk: &[usize]) -> Result<ChunkResult, TrainError> {
    let (batch, labels) = patches.batch(chunk);
    let pyramids = batch_pyramids(&batch, net.config().wavelet_levels)?;
    let mut g = Graph::new();
    let forward = net.forward_eval(&mut g, &batch, &pyramids)?;
    let loss = g.softmax_cross_entropy(forward.logits, &labels)?;
    let predictions = g.value(forward.logits).chunks_exact(net.config().class_count).map(argmax).collect();
    Ok(ChunkResult { loss_sum: g.value(loss)[0] * chunk.len() as f64, predictions })
}

/// Worker count for evaluation: available parallelism, capped by
/// `SPECTRALNET_THREADS` when set.
pub fn eval_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("SPECTRALNET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap > 0 => available.min(cap),
        _ => available,
    }
}

/// Eval-mode inference over `indices`, sharded across `threads` workers.
///
/// Batches are fixed at [`EVAL_BATCH`] and merged in batch order, so the
/// result is identical for any worker count.
pub fn evaluate(
    net: &Network,
    patches: &PatchSet,
    indices: &[usize],
    threads: usize,
) -> Result<Evaluation, TrainError> {
    check_classes(net, patches)?;
    if indices.is_empty() {
        return Err(TrainError::Empty("evaluate"));
    }
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_BATCH).collect();
    let workers = threads.clamp(1, chunks.len());
    let mut results: Vec<Option<Result<ChunkResult, TrainError>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let chunks = &chunks;
                scope.spawn(move || {
                    (w..chunks.len())
                        .step_by(workers)
                        .map(|i| (i, eval_chunk(net, patches, chunks[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                results[i] = Some(r);
            }
        }
    });

    let mut confusion = ConfusionMatrix::new(net.config().class_count);
    let mut loss_sum = 0.0;
    let mut predictions = Vec::with_capacity(indices.len());
    for (chunk, r) in chunks.iter().zip(results) {
        let r = r.expect("every chunk evaluated")?;
        loss_sum += r.loss_sum;
        for (&i, &p) in chunk.iter().zip(&r.predictions) {
            confusion.record(patches.labels()[i], p)?;
        }
        predictions.extend(r.predictions);
    }
    Ok(Evaluation { confusion, loss: loss_sum / indices.len() as f64, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_patches, ReducedCube};
    use crate::model::{build_model, ModelConfig};

    fn toy_patches() -> PatchSet {
        // Two classes: left half dark, right half bright.
        let (rows, cols, bands) = (8, 8, 2);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _r in 0..rows {
            for c in 0..cols {
                let v = if c < 4 { -1.0 } else { 1.0 };
                data.extend([v, 0.5 * v]);
                labels.push(if c < 4 { 1 } else { 2 });
            }
        }
        let reduced = ReducedCube {
            rows,
            cols,
            factors: bands,
            data,
            loadings: vec![],
            uniquenesses: vec![],
            band_means: vec![],
            band_stds: vec![],
            iterations: 0,
            heywood_cases: 0,
            final_delta: 0.0,
        };
        extract_patches(&reduced, &labels, 4).unwrap()
    }

    fn toy_net(classes: usize) -> Network {
        let cfg = ModelConfig {
            stage_channels: vec![3, 4],
            wavelet_levels: 2,
            dense_width: 5,
            dropout_rates: [0.0, 0.0],
            ..ModelConfig::new(4, 2, classes)
        };
        build_model(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let set = toy_patches();
        let mut net = toy_net(2);
        let before: Vec<Vec<f64>> = net.params().iter().map(|p| p.data().to_vec()).collect();
        let cfg =
            TrainConfig { epochs: 3, learning_rate: 0.0, batch_size: 64, shuffle: false, ..TrainConfig::default() };
        let all: Vec<usize> = (0..set.len()).collect();
        let h = fit(&mut net, &set, &all, &cfg).unwrap();
        let after: Vec<Vec<f64>> = net.params().iter().map(|p| p.data().to_vec()).collect();
        assert_eq!(before, after);
        // A single full batch with no dropout: every epoch sees the same loss.
        assert!(h.epochs.windows(2).all(|w| w[0].loss == w[1].loss));
    }

    #[test]
    fn repeated_batch_loss_decreases() {
        let set = toy_patches();
        let mut net = toy_net(2);
        let idx: Vec<usize> = (0..set.len()).step_by(5).collect();
        let cfg = TrainConfig {
            epochs: 10,
            learning_rate: 0.05,
            batch_size: idx.len(),
            shuffle: false,
            ..TrainConfig::default()
        };
        let h = fit(&mut net, &set, &idx, &cfg).unwrap();
        let losses: Vec<f64> = h.epochs.iter().map(|e| e.loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let set = toy_patches();
        let mut net = toy_net(2);
        let all: Vec<usize> = (0..set.len()).collect();
        let cfg = TrainConfig { epochs: 2, batch_size: 16, ..TrainConfig::default() };
        let csv = fit(&mut net, &set, &all, &cfg).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,loss,train_acc");
        assert!(lines[2].starts_with("2,"));
    }

    #[test]
    fn evaluation_is_independent_of_worker_count() {
        let set = toy_patches();
        let mut net = toy_net(2);
        let all: Vec<usize> = (0..set.len()).collect();
        fit(&mut net, &set, &all, &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap();
        net.set_mode(Mode::Eval);
        let big: Vec<usize> = all.iter().cycle().take(200).copied().collect();
        let one = evaluate(&net, &set, &big, 1).unwrap();
        let four = evaluate(&net, &set, &big, 4).unwrap();
        assert_eq!(one, four);
        assert_eq!(one.confusion.total(), 200);
    }

    #[test]
    fn rejects_bad_inputs() {
        let set = toy_patches();
        let mut net = toy_net(3);
        let all: Vec<usize> = (0..set.len()).collect();
        assert!(matches!(
            fit(&mut net, &set, &all, &TrainConfig::default()),
            Err(TrainError::ClassCount { expected: 3, found: 2 })
        ));
        let mut net = toy_net(2);
        assert!(matches!(fit(&mut net, &set, &[], &TrainConfig::default()), Err(TrainError::Empty(_))));
        assert!(fit(&mut net, &set, &all, &TrainConfig { epochs: 0, ..TrainConfig::default() }).is_err());
        assert!(fit(&mut net, &set, &all, &TrainConfig { momentum: 1.0, ..TrainConfig::default() }).is_err());
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let set = toy_patches();
        let mut net = toy_net(2);
        let all: Vec<usize> = (0..set.len()).collect();
        let cfg = TrainConfig { epochs: 50, learning_rate: 1e200, ..TrainConfig::default() };
        assert!(matches!(fit(&mut net, &set, &all, &cfg), Err(TrainError::Diverged { .. })));
    }
}
