//! Losses, the multi-interval joint dataset, training with early stopping,
//! and per-interval fine-tuning.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_rows;
use crate::error::{Error, Result};
use crate::model::{LossParts, Model, PreparedExample};
use crate::params::{Adam, Gradients, Mat, Optimizer, Sgd};
use crate::roadnet::RoadNetwork;
use crate::trajectory::{sparsify, MapMatchedTrajectory, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerKind,
    /// Learning rate for fine-tuning; `lr` when unset.
    pub finetune_lr: Option<f64>,
    pub finetune_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            lr: 1e-4,
            batch_size: 64,
            max_epochs: 50,
            patience: 10,
            optimizer: OptimizerKind::Adam,
            finetune_lr: None,
            finetune_epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if self.lambda.is_nan() || self.lambda < 0.0 || !positive(self.lr) || self.finetune_lr.is_some_and(|lr| !positive(lr)) {
            return Err(Error::Config("lambda must be non-negative and learning rates positive".into()));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("batch size and patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of the true class per row.
pub fn segment_loss(logits: &Mat, targets: &[usize]) -> f64 {
    assert_eq!(logits.nrows(), targets.len(), "one target per row");
    let p = softmax_rows(logits);
    let nll: f64 = targets.iter().enumerate().map(|(i, &t)| -p[[i, t]].ln()).sum();
    nll / targets.len() as f64
}

/// Mean squared difference.
pub fn ratio_loss(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "equal lengths");
    pred.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64
}

pub fn total_loss(segment: f64, ratio: f64, lambda: f64) -> f64 {
    segment + lambda * ratio
}

/// One sparse input with its dense ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub interval: i64,
    pub sparse: Trajectory,
    pub target: MapMatchedTrajectory,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct JointDataset {
    pub examples: Vec<TrainingExample>,
    /// (trajectory, interval) pairs dropped because the trajectory is too short.
    pub skipped: usize,
}

/// Resamples every dense trajectory at every interval.
pub fn joint_dataset(dense: &[(Trajectory, MapMatchedTrajectory)], intervals: &[i64], epsilon: i64) -> Result<JointDataset> {
    let mut out = JointDataset::default();
    for &mu in intervals {
        if mu <= epsilon || mu % epsilon != 0 {
            return Err(Error::Config(format!("interval {mu}s is not a multiple of {epsilon}s above it")));
        }
    }
    for (traj, target) in dense {
        for &mu in intervals {
            if traj.duration() < mu {
                out.skipped += 1;
                continue;
            }
            out.examples.push(TrainingExample { interval: mu, sparse: sparsify(traj, mu, epsilon)?, target: target.clone() });
        }
    }
    Ok(out)
}

/// Prepares examples in parallel, keeping input order.
pub fn prepare_all(model: &Model, net: &RoadNetwork, examples: &[TrainingExample]) -> Result<Vec<PreparedExample>> {
    examples.par_iter().map(|e| model.prepare(net, &e.sparse, e.interval, Some(&e.target))).collect()
}

/// Mean losses and pooled accuracy over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossSummary {
    pub loss: f64,
    pub segment: f64,
    pub ratio: f64,
    /// Percent of slots whose segment is predicted correctly.
    pub acc: f64,
}

impl LossSummary {
    fn from_parts(parts: &[LossParts]) -> Self {
        let n = parts.len().max(1) as f64;
        let (slots, correct) = parts.iter().fold((0, 0), |(s, c), p| (s + p.slots, c + p.correct));
        Self {
            loss: parts.iter().map(|p| p.total).sum::<f64>() / n,
            segment: parts.iter().map(|p| p.segment).sum::<f64>() / n,
            ratio: parts.iter().map(|p| p.ratio).sum::<f64>() / n,
            acc: if slots == 0 { 0.0 } else { 100.0 * correct as f64 / slots as f64 },
        }
    }
}

pub fn evaluate(model: &Model, examples: &[PreparedExample], lambda: f64) -> Result<LossSummary> {
    let parts: Vec<LossParts> =
        examples.par_iter().map(|e| model.loss(e, lambda, false).map(|(p, _)| p)).collect::<Result<_>>()?;
    Ok(LossSummary::from_parts(&parts))
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Absent for the starting state.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_segment_loss: f64,
    pub val_ratio_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch 0 is the starting state.
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

fn make_optimizer(kind: OptimizerKind, lr: f64) -> Box<dyn Optimizer> {
    match kind {
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
        OptimizerKind::Sgd => Box::new(Sgd { lr }),
    }
}

/// Mean loss and summed-then-averaged gradients of a batch. Per-example work
/// runs in parallel; the reduction follows batch order so results do not
/// depend on the thread count.
pub fn batch_gradients(model: &Model, batch: &[&PreparedExample], lambda: f64) -> Result<(f64, Gradients)> {
    let results: Vec<(LossParts, Option<Gradients>)> =
        batch.par_iter().map(|e| model.loss(e, lambda, true)).collect::<Result<_>>()?;
    let mut grads = Gradients::zeros(model.store.len());
    let mut loss = 0.0;
    for (parts, g) in &results {
        loss += parts.total;
        grads.add_assign(g.as_ref().expect("requested gradients"));
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    Ok((loss * scale, grads))
}

/// Minimizes `L_e + λ·L_r` over the trainable parameters with early stopping
/// on validation loss (training loss when `val` is empty). The model is left
/// holding the best parameters seen, the starting point included.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut Model,
    train: &[PreparedExample],
    val: &[PreparedExample],
    cfg: &TrainConfig,
    lr: f64,
    epochs: usize,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let selection = if val.is_empty() { train } else { val };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut optimizer = make_optimizer(cfg.optimizer, lr);
    let start = evaluate(model, selection, cfg.lambda)?;
    if !start.loss.is_finite() {
        return Err(Error::NonFinite { epoch: 0, batch: 0, norms: model.store.norm_report() });
    }
    let record = |epoch, train_loss, s: LossSummary| EpochRecord {
        epoch,
        train_loss,
        val_loss: s.loss,
        val_segment_loss: s.segment,
        val_ratio_loss: s.ratio,
        val_acc: s.acc,
    };
    let mut history = vec![record(0, None, start)];
    let mut best = (0, start.loss, model.store.clone());
    let mut stale = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", serde_json::to_string(&history[0])?)?;
    }
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradients(model, &batch, cfg.lambda)?;
            if !loss.is_finite() || !grads.norm().is_finite() {
                return Err(Error::NonFinite { epoch, batch: b, norms: model.store.norm_report() });
            }
            optimizer.step(&mut model.store, &grads);
            train_loss += loss * batch.len() as f64;
        }
        let summary = evaluate(model, selection, cfg.lambda)?;
        if !summary.loss.is_finite() {
            return Err(Error::NonFinite { epoch, batch: usize::MAX, norms: model.store.norm_report() });
        }
        let rec = record(epoch, Some(train_loss / train.len() as f64), summary);
        log::info!("epoch {epoch}: train {:.5} val {:.5} acc {:.2}%", train_loss / train.len() as f64, rec.val_loss, rec.val_acc);
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        history.push(rec);
        if summary.loss < best.1 {
            best = (epoch, summary.loss, model.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, store) = best;
    model.store = store;
    Ok(TrainReport { history, best_epoch, best_val_loss, stopped_early })
}

/// Joint training with the configured learning rate and epoch budget.
pub fn train_joint(
    model: &mut Model,
    train_set: &[PreparedExample],
    val: &[PreparedExample],
    cfg: &TrainConfig,
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    train(model, train_set, val, cfg, cfg.lr, cfg.max_epochs, seed, log)
}

/// Continues training on the examples of one sampling interval only.
pub fn finetune(
    model: &mut Model,
    train_set: &[PreparedExample],
    val: &[PreparedExample],
    interval: i64,
    cfg: &TrainConfig,
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    let pick = |xs: &[PreparedExample]| xs.iter().filter(|e| e.interval == interval).cloned().collect::<Vec<_>>();
    let (tr, va) = (pick(train_set), pick(val));
    if tr.is_empty() {
        return Err(Error::Config(format!("no training examples at interval {interval}s")));
    }
    let epochs = cfg.finetune_epochs.unwrap_or(cfg.max_epochs);
    train(model, &tr, &va, cfg, cfg.finetune_lr.unwrap_or(cfg.lr), epochs, seed, log)
}
