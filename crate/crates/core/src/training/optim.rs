use super::backprop::Gradients;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::layers::Model;
use crate::tensor::Tensor;

/// Momentum buffers (one per parameter tensor) and schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub velocity: Vec<Tensor>,
    pub epoch: usize,
    pub lr: f64,
}

impl OptState {
    pub fn new(model: &Model, lr: f64) -> Self {
        Self {
            velocity: model.params().map(|p| Tensor::zeros(p.shape())).collect(),
            epoch: 0,
            lr,
        }
    }
}

/// Learning rate at `epoch`: `lr0 · 0.1^(milestones ≤ epoch)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr0 * 0.1f64.powi(drops as i32)
}

/// One Nesterov update on a flat slice:
/// `g' = g + wd·p; v ← μv − lr·g'; p ← p + μv − lr·g'`.
pub fn nesterov_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v) {
        let g = g + weight_decay * *p;
        *v = momentum * *v - lr * g;
        *p += momentum * *v - lr * g;
    }
}

/// Applies one optimizer step to every parameter. Weight decay acts on the
/// raw weights `P` only, never on biases.
pub fn sgd_nesterov_step(model: &mut Model, grads: &Gradients, state: &mut OptState, cfg: &TrainConfig) -> Result<()> {
    let (lr, mu, wd) = (state.lr, cfg.momentum, cfg.weight_decay);
    let grad_tensors: Vec<&Tensor> = grads.tensors().collect();
    if grad_tensors.len() != state.velocity.len() {
        return Err(Error::shape(
            "sgd_nesterov_step",
            format!("{} gradients for {} parameters", grad_tensors.len(), state.velocity.len()),
        ));
    }
    for (k, ((p, g), v)) in model.params_mut().zip(grad_tensors).zip(&mut state.velocity).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_nesterov_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        // params alternate weight, bias
        let decay = if k % 2 == 0 { wd } else { 0.0 };
        nesterov_update(p.data_mut(), g.data(), v.data_mut(), lr, mu, decay);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(p: f64, g: f64, v: f64, lr: f64, mu: f64, wd: f64) -> (f64, f64) {
        let (mut p, mut v) = ([p], [v]);
        nesterov_update(&mut p, &[g], &mut v, lr, mu, wd);
        (p[0], v[0])
    }

    #[test]
    fn plain_sgd() {
        assert_eq!(step(1.0, 0.5, 0.0, 0.1, 0.0, 0.0).0, 0.95);
    }

    #[test]
    fn nesterov_arithmetic() {
        let (p, v) = step(1.0, 0.5, 0.0, 0.1, 0.9, 0.0);
        assert!((v + 0.05).abs() < 1e-15);
        assert!((p - 0.905).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only() {
        let (p, _) = step(1.0, 0.0, 0.0, 0.1, 0.0, 5e-4);
        assert!((p - 0.99995).abs() < 1e-15);
    }

    #[test]
    fn milestone_schedule() {
        let cfg = TrainConfig {
            lr0: 1.0,
            milestones: vec![2, 4],
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|e| lr_at(&cfg, e)).collect();
        assert_eq!(lrs[..2], [1.0, 1.0]);
        assert!((lrs[2] - 0.1).abs() < 1e-15 && (lrs[5] - 0.01).abs() < 1e-15);
    }
}
