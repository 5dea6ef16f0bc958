use super::loss::margin_loss_labels;
use crate::error::{Error, Result};
use crate::layers::{wrap, EffectiveWeight, LinearParams, Model};
use crate::tensor::Tensor;

/// Per-layer parameter gradients, aligned with `model.layers()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LinearParams>>,
}

impl Gradients {
    /// Gradient tensors in the same order as [`Model::params`].
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flatten().flat_map(|p| [&p.weight, &p.bias])
    }

    pub fn norm(&self) -> f64 {
        self.tensors().map(|t| t.norm().powi(2)).sum::<f64>().sqrt()
    }
}

/// Forward pass that keeps every layer input for a reverse sweep.
pub struct Tape<'m> {
    model: &'m Model,
    effective: Vec<Option<EffectiveWeight>>,
    inputs: Vec<Tensor>,
    pub logits: Tensor,
}

impl<'m> Tape<'m> {
    /// Runs a batched forward pass. Non-finite logits are an error.
    pub fn record(model: &'m Model, x: &Tensor) -> Result<Self> {
        let effective = model.effective_weights()?;
        Self::record_with(model, effective, x)
    }

    pub fn record_with(model: &'m Model, effective: Vec<Option<EffectiveWeight>>, x: &Tensor) -> Result<Self> {
        let mut inputs = Vec::with_capacity(model.layers().len());
        let mut h = x.clone();
        for (i, (layer, eff)) in model.layers().iter().zip(&effective).enumerate() {
            let next = layer.apply(&h, eff.as_ref()).map_err(|e| wrap(i, layer, e))?;
            inputs.push(std::mem::replace(&mut h, next));
        }
        if !h.is_finite() {
            return Err(Error::NonFinite("forward pass".into()));
        }
        Ok(Self {
            model,
            effective,
            inputs,
            logits: h,
        })
    }

    /// Reverse sweep from `∂L/∂logits`; returns parameter gradients and `∂L/∂x`.
    pub fn backward(&self, dlogits: &Tensor) -> Result<(Gradients, Tensor)> {
        let layers = self.model.layers();
        let mut grads = vec![None; layers.len()];
        let mut dy = dlogits.clone();
        for i in (0..layers.len()).rev() {
            let (dx, g) = layers[i]
                .backward(&self.inputs[i], self.effective[i].as_ref(), &dy)
                .map_err(|e| wrap(i, &layers[i], e))?;
            grads[i] = g;
            dy = dx;
        }
        Ok((Gradients { layers: grads }, dy))
    }
}

/// Mean margin loss of a batch, its parameter gradients, and the logits.
pub fn loss_and_grad(model: &Model, x: &Tensor, labels: &[usize], u: f64, t: f64) -> Result<(f64, Gradients, Tensor)> {
    let tape = Tape::record(model, x)?;
    let (loss, dlogits) = margin_loss_labels(&tape.logits, labels, u, t)?;
    let (grads, _) = tape.backward(&dlogits)?;
    Ok((loss, grads, tape.logits))
}

/// Batch loss only (used by finite-difference checks).
pub fn loss(model: &Model, x: &Tensor, labels: &[usize], u: f64, t: f64) -> Result<f64> {
    let logits = model.forward(x)?;
    Ok(margin_loss_labels(&logits, labels, u, t)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{build_model, LayerSpec, ModelSpec, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_output_has_zero_bias_gradient() {
        // the last dense layer has 4 outputs, only 2 survive truncation
        let spec = ModelSpec {
            input_shape: Shape::Flat(4),
            layers: vec![LayerSpec::Dense { out_dim: 4 }, LayerSpec::FirstChannels { n: 2 }],
        };
        let model = build_model(&spec, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
        let (_, grads, _) = loss_and_grad(&model, &x, &[0, 1, 0], 1.0, 0.5).unwrap();
        let g = grads.layers[0].as_ref().unwrap();
        assert_eq!(&g.bias.data()[2..], &[0.0, 0.0]);
        assert!(g.weight.data()[8..].iter().all(|&v| v == 0.0));
        assert!(g.bias.data()[..2].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let spec = ModelSpec {
            input_shape: Shape::Flat(4),
            layers: vec![
                LayerSpec::AolFc { out_dim: 6 },
                LayerSpec::MaxMin,
                LayerSpec::AolFc { out_dim: 3 },
            ],
        };
        let model = build_model(&spec, 3).unwrap();
        let x = Tensor::new(vec![1, 4], vec![0.3, -0.7, 0.2, 0.9]).unwrap();
        let tape = Tape::record(&model, &x).unwrap();
        let (_, d) = margin_loss_labels(&tape.logits, &[2], 1.0, 0.5).unwrap();
        let (_, dx) = tape.backward(&d).unwrap();
        for i in 0..4 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&model, &xp, &[2], 1.0, 0.5).unwrap() - loss(&model, &xm, &[2], 1.0, 0.5).unwrap()) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let spec = ModelSpec {
            input_shape: Shape::Flat(2),
            layers: vec![LayerSpec::Dense { out_dim: 2 }],
        };
        let model = build_model(&spec, 0).unwrap();
        let x = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            loss_and_grad(&model, &x, &[0], 1.0, 1.0),
            Err(Error::NonFinite(_))
        ));
    }
}
