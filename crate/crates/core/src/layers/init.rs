use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Layer, LayerSpec, LinearParams, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::{Padding, Tensor};

/// `rows × cols` row-major matrix with orthonormal columns (if tall) or
/// orthonormal rows (if wide), from the QR factorization of a Gaussian matrix.
pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut impl RngCore) -> Vec<f64> {
    if rows < cols {
        let t = random_orthonormal(cols, rows, rng);
        return (0..rows * cols).map(|i| t[(i % cols) * rows + i / cols]).collect();
    }
    let g = DMatrix::<f64>::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut out = vec![0.0; rows * cols];
    for j in 0..cols {
        // sign fix makes the distribution Haar and the result unique
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..rows {
            out[i * cols + j] = s * q[(i, j)];
        }
    }
    out
}

/// Layers that admit the identity initialization.
pub fn is_size_preserving(layer: &Layer) -> bool {
    match *layer.spec() {
        LayerSpec::AolFc { out_dim } | LayerSpec::Dense { out_dim } => layer.input_shape().numel() == out_dim,
        LayerSpec::AolConv {
            kernel_size,
            stride,
            out_channels,
            padding,
        }
        | LayerSpec::Conv {
            kernel_size,
            stride,
            out_channels,
            padding,
        } => {
            layer.input_shape().channels() == out_channels
                && stride == 1
                && kernel_size % 2 == 1
                && (padding == Padding::SameZero || kernel_size == 1)
        }
        _ => false,
    }
}

/// Identity matrix or centred delta kernel; bias zero.
pub fn init_identity(layer: &Layer) -> Result<LinearParams> {
    if !layer.spec().has_params() {
        return Err(Error::InvalidSpec(format!("{} layer has no parameters", layer.spec().kind())));
    }
    if !is_size_preserving(layer) {
        return Err(Error::InvalidSpec(format!(
            "identity init needs a size-preserving layer, {} maps {:?} to {:?}",
            layer.spec().kind(),
            layer.input_shape().dims(),
            layer.output_shape().dims()
        )));
    }
    let params = layer.params.as_ref().expect("parameter layer");
    let mut weight = Tensor::zeros(params.weight.shape());
    match layer.geometry() {
        Some(g) => {
            let t = g.kernel_size / 2;
            for c in 0..g.in_channels {
                weight.set(&[t, t, c, c], 1.0);
            }
        }
        None => weight = Tensor::eye(layer.input_shape().numel()),
    }
    Ok(LinearParams {
        weight,
        bias: Tensor::zeros(params.bias.shape()),
    })
}

/// Random orthogonal initialization; bias zero.
///
/// Dense `P` (`out × in`) gets orthonormal columns when tall. A convolution
/// whose stride equals its kernel size sees disjoint patches, so its whole
/// `c_out × k²c_in` patch matrix is made orthogonal; any other convolution
/// gets a single tap at the centre holding an orthogonal `c_in × c_out` block.
pub fn init_orthogonal(layer: &Layer, seed: u64) -> Result<LinearParams> {
    let params = layer
        .params
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec(format!("{} layer has no parameters", layer.spec().kind())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = params.weight.shape();
    let weight = match layer.geometry() {
        None => {
            let (out, inp) = (shape[0], shape[1]);
            Tensor::new(shape.to_vec(), random_orthonormal(out, inp, &mut rng))?
        }
        Some(g) if g.stride == g.kernel_size => {
            let k = g.kernel_size;
            let patch = k * k * g.in_channels;
            let m = random_orthonormal(g.out_channels, patch, &mut rng);
            Tensor::from_fn(shape, |idx| {
                let (ppa, b) = (idx / g.out_channels, idx % g.out_channels);
                m[b * patch + ppa]
            })
        }
        Some(g) => {
            let t = (g.kernel_size - 1) / 2;
            let m = random_orthonormal(g.in_channels, g.out_channels, &mut rng);
            let mut w = Tensor::zeros(shape);
            for a in 0..g.in_channels {
                for b in 0..g.out_channels {
                    w.set(&[t, t, a, b], m[a * g.out_channels + b]);
                }
            }
            w
        }
    };
    Ok(LinearParams {
        weight,
        bias: Tensor::zeros(params.bias.shape()),
    })
}

/// Instantiates a spec: identity init where size-preserving, orthogonal
/// otherwise. Each parameter layer draws its own seed from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let mut model = Model::new(spec.clone())?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    for (index, layer) in model.layers_mut().iter_mut().enumerate() {
        if !layer.spec().has_params() {
            continue;
        }
        let layer_seed = master.next_u64();
        let params = if is_size_preserving(layer) {
            init_identity(layer)
        } else {
            init_orthogonal(layer, layer_seed)
        };
        let params = params.map_err(|e| super::wrap(index, layer, e))?;
        layer.set_params(params)?;
    }
    Ok(model)
}
