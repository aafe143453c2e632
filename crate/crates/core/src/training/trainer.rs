use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::{margin_loss, total_loss, LossConfig};
use super::optim::Adam;
use super::recon::{reconstruct, reconstruction_loss};
use super::schedule::{lr_at, m_plus_at, ScheduleConfig};
use crate::autodiff::Tape;
use crate::capsule::argmax;
use crate::config::{parse, ModelConfig};
use crate::data::{to_batch, BeatRecord, DatasetSplit};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::{confusion, per_class_metrics, ConfusionMatrix};
use crate::model::MambaCapsule;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub lr_min: f64,
    /// Share of all optimiser steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub m_plus_end: f64,
    pub seed: u64,
    /// Number of data-parallel shards per batch.
    pub workers: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr_peak: 3e-3,
            lr_min: 1e-5,
            warmup_fraction: 0.1,
            m_plus_end: 0.95,
            seed: 0,
            workers: 1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings matching [`ModelConfig::tiny`].
    pub fn tiny() -> Self {
        Self {
            batch_size: 16,
            loss: LossConfig::for_model(&ModelConfig::tiny()),
            ..Self::default()
        }
    }

    /// Every field, loss settings included, as a `key=value` pair.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_peak", self.lr_peak.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            ("m_plus_start", self.loss.m_plus_start.to_string()),
            ("m_plus_end", self.m_plus_end.to_string()),
            ("m_minus", self.loss.m_minus.to_string()),
            ("lambda", self.loss.lambda.to_string()),
            ("recon_weight", self.loss.recon_weight.to_string()),
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
        ]
    }

    /// Sets one field from its textual form. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr_peak" => self.lr_peak = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "m_plus_start" => self.loss.m_plus_start = parse(key, value)?,
            "m_plus_end" => self.m_plus_end = parse(key, value)?,
            "m_minus" => self.loss.m_minus = parse(key, value)?,
            "lambda" => self.loss.lambda = parse(key, value)?,
            "recon_weight" => self.loss.recon_weight = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown train key {key:?}"))),
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size.max(1))
    }

    pub fn schedule(&self, n_train: usize) -> Result<ScheduleConfig> {
        let total = (self.epochs * self.steps_per_epoch(n_train)).max(2);
        let warmup = ((self.warmup_fraction * total as f64).round() as usize).clamp(1, total - 1);
        let s = ScheduleConfig {
            warmup_steps: warmup,
            total_steps: total,
            lr_peak: self.lr_peak,
            lr_min: self.lr_min,
            m_plus_start: self.loss.m_plus_start,
            m_plus_end: self.m_plus_end,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.workers == 0 {
            return Err(Error::Config("epochs, batch_size and workers must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction ({}) must lie in [0, 1)",
                self.warmup_fraction
            )));
        }
        self.loss.validate()
    }
}

/// Loss components for one optimiser step, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub margin: f64,
    pub recon: f64,
    pub total: f64,
    pub correct: usize,
    pub count: usize,
}

impl StepStats {
    fn merge(mut self, other: StepStats) -> StepStats {
        self.margin += other.margin;
        self.recon += other.recon;
        self.total += other.total;
        self.correct += other.correct;
        self.count += other.count;
        self
    }
}

/// One log line per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub m_plus: f64,
    pub margin_loss: f64,
    pub recon_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub test_macro_f1: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} step={} lr={:.6e} m_plus={:.6} margin_loss={:.10} recon_loss={:.10} train_acc={:.4}",
            self.epoch, self.step, self.lr, self.m_plus, self.margin_loss, self.recon_loss, self.train_acc
        )?;
        if let (Some(acc), Some(f1)) = (self.test_acc, self.test_macro_f1) {
            write!(f, " test_acc={acc:.4} test_macro_f1={f1:.4}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub test_confusion: Option<ConfusionMatrix>,
}

fn shard_gradients(
    model: &MambaCapsule,
    batch: &[&BeatRecord],
    seeds: &[u64],
    m_plus: f64,
    loss_cfg: &LossConfig,
    batch_total: usize,
) -> Result<(StepStats, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let x_val = to_batch(batch)?;
    let x = tape.constant(x_val.clone());
    let labels: Vec<usize> = batch.iter().map(|r| r.label).collect();
    let caps = model.forward(&mut tape, &p, x, Mode::Train { sample_seeds: seeds })?;
    let margin = margin_loss(&mut tape, caps.norms, &labels, m_plus, loss_cfg)?;
    let recon = reconstruct(&mut tape, &p, &model.recon, caps.capsules, &labels)?;
    let recon = reconstruction_loss(&mut tape, recon, &x_val)?;
    let total = total_loss(&mut tape, margin, recon, loss_cfg)?;
    let share = batch.len() as f64 / batch_total as f64;
    let scaled = tape.scale(total, share);
    let k = model.config.n_classes;
    let correct = tape
        .value(caps.norms)
        .data()
        .chunks(k)
        .zip(&labels)
        .filter(|(n, &l)| argmax(n) == l)
        .count();
    let stats = StepStats {
        margin: tape.value(margin).item()? * share,
        recon: tape.value(recon).item()? * share,
        total: tape.value(total).item()? * share,
        correct,
        count: batch.len(),
    };
    let grads = tape.backward(scaled)?;
    Ok((stats, p.collect_grads(&grads, &model.store)))
}

/// Batch-mean loss and its gradient, computed over `workers` shards.
///
/// `seeds` holds one dropout seed per record.
pub fn batch_gradients(
    model: &MambaCapsule,
    batch: &[&BeatRecord],
    seeds: &[u64],
    m_plus: f64,
    loss_cfg: &LossConfig,
    workers: usize,
) -> Result<(StepStats, Vec<Tensor>)> {
    if batch.is_empty() || seeds.len() != batch.len() {
        return Err(Error::Shape(format!(
            "batch of {} records with {} seeds",
            batch.len(),
            seeds.len()
        )));
    }
    let shard = batch.len().div_ceil(workers.max(1));
    let parts = batch
        .par_chunks(shard)
        .zip(seeds.par_chunks(shard))
        .map(|(b, s)| shard_gradients(model, b, s, m_plus, loss_cfg, batch.len()))
        .collect::<Result<Vec<_>>>()?;
    let mut iter = parts.into_iter();
    let (mut stats, mut grads) = iter.next().expect("non-empty batch");
    for (s, g) in iter {
        stats = stats.merge(s);
        for (acc, part) in grads.iter_mut().zip(g) {
            acc.data_mut().iter_mut().zip(part.data()).for_each(|(a, b)| *a += b);
        }
    }
    Ok((stats, grads))
}

fn check_finite(model: &MambaCapsule, stats: &StepStats, grads: &[Tensor], where_: &str) -> Result<()> {
    for (name, v) in [("margin loss", stats.margin), ("reconstruction loss", stats.recon)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} became {v} at {where_}")));
        }
    }
    for (id, g) in model.store.ids().zip(grads) {
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "gradient of {} is non-finite at {where_}",
                model.store.name(id)
            )));
        }
    }
    Ok(())
}

/// One optimiser step on `batch`.
pub fn train_step(
    model: &mut MambaCapsule,
    adam: &mut Adam,
    batch: &[&BeatRecord],
    seeds: &[u64],
    m_plus: f64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let (stats, grads) = batch_gradients(model, batch, seeds, m_plus, &cfg.loss, cfg.workers)?;
    check_finite(model, &stats, &grads, &format!("optimiser step {}", adam.steps_taken()))?;
    adam.step(&mut model.store, &grads, lr);
    if let Some(id) = model.store.ids().find(|&id| !model.store.get(id).all_finite()) {
        return Err(Error::Numeric(format!(
            "parameter {} became non-finite",
            model.store.name(id)
        )));
    }
    Ok(stats)
}

/// Confusion matrix of `model` on `records`.
pub fn evaluate(model: &MambaCapsule, records: &[BeatRecord]) -> Result<ConfusionMatrix> {
    let preds = model.predict(records)?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    confusion(&preds, &labels, model.config.n_classes)
}

/// Mini-batch training with warmup + cosine learning rate, a rising
/// positive margin and Adam updates. `on_epoch` runs after every epoch
/// (for logging and checkpointing). Fully determined by `cfg.seed`.
pub fn train(
    model: &mut MambaCapsule,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &MambaCapsule) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if let Some(r) = split
        .train
        .iter()
        .chain(&split.test)
        .find(|r| r.label >= model.config.n_classes)
    {
        return Err(Error::Config(format!(
            "label {} out of range for {} classes",
            r.label, model.config.n_classes
        )));
    }
    let schedule = cfg.schedule(split.train.len())?;
    let mut adam = Adam::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut test_confusion = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_stats = StepStats::default();
        let (mut lr, mut m_plus) = (0.0, schedule.m_plus_start);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            lr = lr_at(step, &schedule);
            m_plus = m_plus_at(step, &schedule);
            let batch: Vec<&BeatRecord> = chunk.iter().map(|&i| &split.train[i]).collect();
            let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.random()).collect();
            let s = train_step(model, &mut adam, &batch, &seeds, m_plus, lr, cfg)?;
            let w = batch.len() as f64;
            epoch_stats = epoch_stats.merge(StepStats {
                margin: s.margin * w,
                recon: s.recon * w,
                total: s.total * w,
                ..s
            });
        }
        let n = epoch_stats.count as f64;
        let (test_acc, test_macro_f1) = if split.test.is_empty() {
            (None, None)
        } else {
            let cm = evaluate(model, &split.test)?;
            let report = per_class_metrics(&cm)?;
            let acc = cm.overall_accuracy();
            test_confusion = Some(cm);
            (Some(acc), Some(report.macro_avg.f1_standard))
        };
        let record = EpochRecord {
            epoch,
            step,
            lr,
            m_plus,
            margin_loss: epoch_stats.margin / n,
            recon_loss: epoch_stats.recon / n,
            train_acc: epoch_stats.correct as f64 / n,
            test_acc,
            test_macro_f1,
        };
        on_epoch(&record, model)?;
        history.push(record);
    }
    Ok(TrainSummary {
        epochs: history,
        test_confusion,
    })
}
