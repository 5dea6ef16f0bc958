use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Offset-and-temperature cross-entropy, averaged over the batch:
/// `t · CE(y, softmax((s − u·y) / t))`.
///
/// `y` must be one-hot. Always non-negative.
pub fn margin_loss(s: &Tensor, y: &Tensor, u: f64, t: f64) -> Result<f64> {
    Ok(margin_loss_grad(s, y, u, t)?.0)
}

/// Loss and its gradient with respect to the logits `s`.
///
/// The gradient is `(softmax(z) − y) / batch`; the temperature cancels.
pub fn margin_loss_grad(s: &Tensor, y: &Tensor, u: f64, t: f64) -> Result<(f64, Tensor)> {
    if s.shape() != y.shape() || s.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "margin_loss",
            left: s.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let l = s.shape()[1];
    let labels = y
        .data()
        .chunks_exact(l)
        .enumerate()
        .map(|(row, r)| one_hot_index(r).ok_or(Error::NotOneHot { row }))
        .collect::<Result<Vec<_>>>()?;
    margin_loss_labels(s, &labels, u, t)
}

fn one_hot_index(row: &[f64]) -> Option<usize> {
    let mut hot = None;
    for (i, &v) in row.iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    hot
}

/// Same as [`margin_loss_grad`] with integer labels.
pub fn margin_loss_labels(s: &Tensor, labels: &[usize], u: f64, t: f64) -> Result<(f64, Tensor)> {
    if !(t > 0.0) || !(u >= 0.0) {
        return Err(Error::InvalidConfig(format!("loss needs t > 0 and u ≥ 0, got t={t}, u={u}")));
    }
    if s.rank() != 2 || s.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "margin_loss",
            format!("logits {:?} for {} labels", s.shape(), labels.len()),
        ));
    }
    let l = s.shape()[1];
    let batch = labels.len() as f64;
    let mut grad = Tensor::zeros(s.shape());
    let mut total = 0.0;
    let mut z = vec![0.0; l];
    for ((row, g), &y) in s.data().chunks_exact(l).zip(grad.data_mut().chunks_exact_mut(l)).zip(labels) {
        if y >= l {
            return Err(Error::LabelOutOfRange { label: y, classes: l });
        }
        for (i, (zi, &si)) in z.iter_mut().zip(row).enumerate() {
            *zi = (si - if i == y { u } else { 0.0 }) / t;
        }
        let top = (0..l).max_by(|&a, &b| z[a].total_cmp(&z[b])).expect("l ≥ 1");
        let zmax = z[top];
        // ln Σ exp(z − zmax) via ln_1p keeps tiny losses from rounding to zero
        let rest: f64 = z.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, &v)| (v - zmax).exp()).sum();
        let lse = zmax + rest.ln_1p();
        total += t * ((zmax - z[y]) + rest.ln_1p());
        for (i, (gi, &zi)) in g.iter_mut().zip(&z).enumerate() {
            let p = (zi - lse).exp();
            *gi = (p - if i == y { 1.0 } else { 0.0 }) / batch;
        }
    }
    Ok((total / batch, grad))
}
