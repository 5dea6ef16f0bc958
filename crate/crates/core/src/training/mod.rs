//! Gradient evaluation, the margin loss, and the SGD training loop.

mod backprop;
mod loss;
mod optim;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backprop::{loss, loss_and_grad, Gradients, Tape};
pub use loss::{margin_loss, margin_loss_grad, margin_loss_labels};
pub use optim::{lr_at, nesterov_update, sgd_nesterov_step, OptState};

use crate::certification::certified_robust_accuracy;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::layers::Model;
use crate::tensor::Tensor;

/// Random spatial augmentation, redrawn for every sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    /// Horizontal flip with probability 1/2.
    pub flip: bool,
    /// Largest translation as a fraction of the image side (zero fill).
    pub max_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by 0.1.
    pub milestones: Vec<usize>,
    pub weight_decay: f64,
    /// `u` in the margin loss.
    pub loss_offset: f64,
    /// `t` in the margin loss.
    pub loss_temperature: f64,
    pub seed: u64,
    pub augment: Augment,
    /// Radii for the per-epoch certified accuracy columns.
    pub eval_eps: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            momentum: 0.9,
            batch_size: 250,
            epochs: 10,
            milestones: vec![],
            weight_decay: 5e-4,
            loss_offset: std::f64::consts::SQRT_2,
            loss_temperature: 0.25,
            seed: 0,
            augment: Augment::default(),
            eval_eps: vec![36.0 / 255.0],
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted (it freezes the parameters).
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.lr0.is_finite() && self.lr0 >= 0.0, "lr0 must be ≥ 0"),
            ((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.weight_decay >= 0.0, "weight_decay must be ≥ 0"),
            (self.loss_temperature > 0.0, "loss_temperature must be > 0"),
            (self.loss_offset >= 0.0, "loss_offset must be ≥ 0"),
            ((0.0..1.0).contains(&self.augment.max_shift), "augment.max_shift must lie in [0, 1)"),
            (self.eval_eps.iter().all(|&e| e >= 0.0), "eval_eps must be ≥ 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidConfig((*msg).into())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Certified validation accuracy at each of `TrainConfig::eval_eps`.
    pub cert_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub eval_eps: Vec<f64>,
    pub epochs: Vec<EpochMetrics>,
}

impl TrainLog {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        write!(out, "epoch,lr,train_loss,train_acc,val_acc")?;
        for eps in &self.eval_eps {
            write!(out, ",cert_acc@{eps}")?;
        }
        writeln!(out)?;
        for m in &self.epochs {
            let val = m.val_acc.map(|v| v.to_string()).unwrap_or_default();
            write!(out, "{},{},{},{},{}", m.epoch, m.lr, m.train_loss, m.train_acc, val)?;
            for c in &m.cert_acc {
                write!(out, ",{c}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

/// Hook called after every epoch.
pub trait TrainObserver {
    fn on_epoch(&mut self, _metrics: &EpochMetrics, _model: &Model) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Silent;

impl TrainObserver for Silent {}

impl<F: FnMut(&EpochMetrics, &Model) -> Result<()>> TrainObserver for F {
    fn on_epoch(&mut self, metrics: &EpochMetrics, model: &Model) -> Result<()> {
        self(metrics, model)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

/// Trains `model` with shuffled minibatches (last partial batch kept).
///
/// Deterministic for a fixed `cfg.seed`. A non-finite loss aborts with
/// [`Error::Diverged`] carrying the parameters from the last finished epoch.
pub fn train(
    mut model: Model,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(&model, train_set)?;
    if let Some(v) = val_set {
        check_compatible(&model, v)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptState::new(&model, cfg.lr0);
    let mut log = TrainLog {
        eval_eps: cfg.eval_eps.clone(),
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let last_good = model.clone();
        state.epoch = epoch;
        state.lr = lr_at(cfg, epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = train_set.images.gather_batch(chunk);
            augment_batch(&mut x, &cfg.augment, &mut rng);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let diverged = || Error::Diverged {
                epoch,
                last_good: Box::new(last_good.clone()),
            };
            let (loss, grads, logits) = match loss_and_grad(&model, &x, &labels, cfg.loss_offset, cfg.loss_temperature) {
                Err(Error::NonFinite(_)) => return Err(diverged()),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(diverged());
            }
            sgd_nesterov_step(&mut model, &grads, &mut state, cfg)?;
            loss_sum += loss * chunk.len() as f64;
            correct += count_correct(&logits, &labels);
        }
        let n = train_set.len() as f64;
        let (val_acc, cert_acc) = match val_set {
            Some(v) => {
                let report = certified_robust_accuracy(&model, v, &cfg.eval_eps, 1.0)?;
                (Some(report.clean_accuracy), report.results.iter().map(|r| r.cert_acc).collect())
            }
            None => (None, vec![]),
        };
        let metrics = EpochMetrics {
            epoch,
            lr: state.lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_acc,
            cert_acc,
        };
        observer.on_epoch(&metrics, &model)?;
        log.epochs.push(metrics);
    }
    Ok(TrainOutcome { model, log })
}

fn check_compatible(model: &Model, ds: &Dataset) -> Result<()> {
    if ds.example_shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "dataset vs model input",
            left: ds.example_shape().dims(),
            right: model.input_shape().dims(),
        });
    }
    if ds.num_classes > model.num_outputs() {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes but the model has {} outputs",
            ds.num_classes,
            model.num_outputs()
        )));
    }
    if ds.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    Ok(())
}

/// Strict argmax hits (ties count as wrong).
fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let l = logits.shape()[1];
    logits
        .data()
        .chunks_exact(l)
        .zip(labels)
        .filter(|(row, &y)| row.iter().enumerate().all(|(i, &v)| i == y || v < row[y]))
        .count()
}

/// In-place per-sample flip and translation of an image batch.
pub fn augment_batch(x: &mut Tensor, aug: &Augment, rng: &mut impl Rng) {
    if (!aug.flip && aug.max_shift == 0.0) || x.rank() != 4 {
        return;
    }
    let (h, w, c) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let max_dy = (aug.max_shift * h as f64).round() as i64;
    let max_dx = (aug.max_shift * w as f64).round() as i64;
    let mut buf = vec![0.0; h * w * c];
    for img in x.data_mut().chunks_exact_mut(h * w * c) {
        let flip = aug.flip && rng.random_bool(0.5);
        let dy = if max_dy > 0 { rng.random_range(-max_dy..=max_dy) as isize } else { 0 };
        let dx = if max_dx > 0 { rng.random_range(-max_dx..=max_dx) as isize } else { 0 };
        if !flip && dy == 0 && dx == 0 {
            continue;
        }
        buf.fill(0.0);
        for i in 0..h as isize {
            let si = i - dy;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w as isize {
                let mut sj = j - dx;
                if sj < 0 || sj >= w as isize {
                    continue;
                }
                if flip {
                    sj = w as isize - 1 - sj;
                }
                let dst = (i as usize * w + j as usize) * c;
                let src = (si as usize * w + sj as usize) * c;
                buf[dst..dst + c].copy_from_slice(&img[src..src + c]);
            }
        }
        img.copy_from_slice(&buf);
    }
}
