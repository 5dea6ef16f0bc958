//! Margin certificates for L2 robustness.
//!
//! A classifier with Lipschitz constant `L` cannot change its decision on
//! `x` within an L2 ball of radius `ε` if the logit margin exceeds `√2·L·ε`.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::layers::Model;
use crate::tensor::Tensor;
use crate::training::Tape;

/// 36/255, 72/255, 108/255 and 1.
pub const DEFAULT_EPS: [f64; 4] = [36.0 / 255.0, 72.0 / 255.0, 108.0 / 255.0, 1.0];

/// Examples per forward pass during evaluation.
const EVAL_CHUNK: usize = 250;

/// `[s_y − max_{i≠y} s_i]₊`.
pub fn margin(logits: &[f64], y: usize) -> Result<f64> {
    Ok(signed_gap(logits, y)?.max(0.0))
}

/// Unclamped `s_y − max_{i≠y} s_i`.
fn signed_gap(logits: &[f64], y: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::shape("margin", "need at least two logits"));
    }
    if y >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: logits.len(),
        });
    }
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[y] - other)
}

/// Strict test `margin > √2·L·ε`.
pub fn certified(margin_value: f64, eps: f64, lipschitz: f64) -> bool {
    margin_value > std::f64::consts::SQRT_2 * lipschitz * eps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsResult {
    pub eps: f64,
    pub certified: usize,
    pub total: usize,
    pub cert_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub lipschitz_bound: f64,
    pub total: usize,
    /// Strictly correct predictions (argmax ties count as wrong).
    pub clean_correct: usize,
    pub clean_accuracy: f64,
    pub results: Vec<EpsResult>,
    /// Clamped margin of every example.
    pub margins: Vec<f64>,
}

impl CertReport {
    /// Counts certificates for precomputed margins.
    pub fn from_margins(margins: Vec<f64>, eps_list: &[f64], lipschitz: f64) -> Self {
        let total = margins.len();
        let acc = |count: usize| if total == 0 { 0.0 } else { count as f64 / total as f64 };
        // correct ⇔ strictly positive margin
        let clean_correct = margins.iter().filter(|&&m| m > 0.0).count();
        let results = eps_list
            .iter()
            .map(|&eps| {
                let count = margins.iter().filter(|&&m| certified(m, eps, lipschitz)).count();
                EpsResult {
                    eps,
                    certified: count,
                    total,
                    cert_acc: acc(count),
                }
            })
            .collect();
        Self {
            lipschitz_bound: lipschitz,
            total,
            clean_correct,
            clean_accuracy: acc(clean_correct),
            results,
            margins,
        }
    }

    pub fn cert_acc(&self, eps: f64) -> Option<f64> {
        self.results.iter().find(|r| r.eps == eps).map(|r| r.cert_acc)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// One row per ε: `eps,certified,total,cert_acc`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "eps,certified,total,cert_acc")?;
        for r in &self.results {
            writeln!(out, "{},{},{},{}", r.eps, r.certified, r.total, r.cert_acc)?;
        }
        Ok(())
    }
}

/// Logits for every example, evaluated in parallel chunks.
pub fn predict_logits(model: &Model, images: &Tensor) -> Result<Tensor> {
    let eff = model.effective_weights()?;
    let n = images.shape()[0];
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| model.forward_with(&images.slice_batch(s, (s + EVAL_CHUNK).min(n)), &eff))
        .collect::<Result<Vec<_>>>()?;
    let l = model.num_outputs();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![n, l], data)
}

/// Clean and certified accuracy over `eps_list`.
pub fn certified_robust_accuracy(model: &Model, ds: &Dataset, eps_list: &[f64], lipschitz: f64) -> Result<CertReport> {
    if ds.example_shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "certified_robust_accuracy",
            left: ds.example_shape().dims(),
            right: model.input_shape().dims(),
        });
    }
    let logits = predict_logits(model, &ds.images)?;
    let l = model.num_outputs();
    let margins = logits
        .data()
        .chunks_exact(l)
        .zip(&ds.labels)
        .map(|(row, &y)| margin(row, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(CertReport::from_margins(margins, eps_list, lipschitz))
}

/// Outcome of an attack probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    /// No perturbation flipped the prediction.
    pub held: bool,
    /// Smallest logit gap seen over all perturbations.
    pub min_gap: f64,
}

/// Searches the L2 ball of radius `eps` around a certified `x` for a
/// perturbation that changes the predicted class: `n_trials` uniform
/// samples on the sphere, then 20 projected gradient steps from the worst
/// sample. Returns `true` iff nothing flipped.
///
/// Errors if `x` is not certified at `eps` for a 1-Lipschitz model.
pub fn attack_check(model: &Model, x: &Tensor, y: usize, eps: f64, n_trials: usize, seed: u64) -> Result<bool> {
    Ok(attack_probe(model, x, y, eps, n_trials, seed)?.held)
}

pub fn attack_probe(model: &Model, x: &Tensor, y: usize, eps: f64, n_trials: usize, seed: u64) -> Result<AttackOutcome> {
    let eff = model.effective_weights()?;
    let dims = model.input_shape().batched(1);
    let x = x.clone().reshape(&dims)?;
    let logits = model.forward_with(&x, &eff)?;
    let m = margin(logits.data(), y)?;
    if eps == 0.0 {
        return Ok(AttackOutcome { held: true, min_gap: m });
    }
    let threshold = std::f64::consts::SQRT_2 * eps;
    if !certified(m, eps, 1.0) {
        return Err(Error::NotCertified {
            eps,
            margin: m,
            threshold,
        });
    }
    let d = x.len();
    let l = model.num_outputs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_gap = f64::INFINITY;
    let mut worst = vec![0.0; d];
    let mut done = 0;
    while done < n_trials {
        let b = EVAL_CHUNK.min(n_trials - done);
        let mut batch = Tensor::zeros(&model.input_shape().batched(b));
        let mut deltas = Vec::with_capacity(b * d);
        for row in batch.data_mut().chunks_exact_mut(d) {
            let delta = sphere_sample(d, eps, &mut rng);
            for ((r, &xi), &di) in row.iter_mut().zip(x.data()).zip(&delta) {
                *r = xi + di;
            }
            deltas.extend(delta);
        }
        let out = model.forward_with(&batch, &eff)?;
        for (k, row) in out.data().chunks_exact(l).enumerate() {
            let gap = signed_gap(row, y)?;
            if gap < min_gap {
                min_gap = gap;
                worst.copy_from_slice(&deltas[k * d..(k + 1) * d]);
            }
        }
        done += b;
    }
    // projected gradient descent on the gap
    let step = 2.5 * eps / 20.0;
    let mut delta = worst;
    for _ in 0..20 {
        let xp = Tensor::from_fn(x.shape(), |i| x.data()[i] + delta[i]);
        let tape = Tape::record_with(model, eff.clone(), &xp)?;
        let row = tape.logits.data();
        let gap = signed_gap(row, y)?;
        min_gap = min_gap.min(gap);
        if gap <= 0.0 {
            break;
        }
        let j = (0..l)
            .filter(|&i| i != y)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .expect("at least two classes");
        let mut dg = Tensor::zeros(&[1, l]);
        dg.data_mut()[y] = 1.0;
        dg.data_mut()[j] = -1.0;
        let (_, gx) = tape.backward(&dg)?;
        let gnorm = gx.norm();
        if gnorm == 0.0 {
            break;
        }
        for (di, gi) in delta.iter_mut().zip(gx.data()) {
            *di -= step * gi / gnorm;
        }
        let dn = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dn > eps {
            delta.iter_mut().for_each(|v| *v *= eps / dn);
        }
    }
    Ok(AttackOutcome {
        held: min_gap > 0.0,
        min_gap,
    })
}

fn sphere_sample(d: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|a| a * radius / n).collect();
        }
    }
}
