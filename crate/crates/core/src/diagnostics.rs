//! Independent checks on the Lipschitz machinery: power iteration,
//! explicit Jacobians, `JᵀJ` statistics, model bound audits and
//! finite-difference gradient checks.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerSpec, Model};
use crate::tensor::{gemm, Tensor};
use crate::training::{loss, loss_and_grad};

/// Largest input or output dimension [`materialize_jacobian`] will build.
pub const JACOBIAN_LIMIT: usize = 10_000;

/// Layers above this spectral norm are flagged by [`audit_model_bound`].
pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    pub iters: usize,
    /// Relative change of the estimate that ends the iteration early.
    pub tol: f64,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            iters: 200,
            tol: 1e-12,
            seed: 0,
        }
    }
}

/// Estimates `σ_max(A)` by power iteration on `AᵀA`, starting from a seeded
/// Gaussian vector. The estimate approaches `σ_max` from below.
pub fn spectral_norm_power_iteration(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    apply_transpose: impl Fn(&[f64]) -> Vec<f64>,
    dim: usize,
    opts: PowerIteration,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut sigma = 0.0;
    for _ in 0..opts.iters.max(1) {
        let n = norm(&v);
        if n == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= n);
        let av = apply(&v);
        // ‖Av‖ = √(vᵀAᵀAv) for unit v
        let next = norm(&av);
        let converged = (next - sigma).abs() <= opts.tol * next;
        sigma = next;
        if converged || sigma == 0.0 {
            break;
        }
        v = apply_transpose(&av);
    }
    sigma
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spectral norm of a dense `rows × cols` matrix.
pub fn matrix_spectral_norm(w: &Tensor, opts: PowerIteration) -> Result<f64> {
    let (r, c) = w.as_matrix("matrix_spectral_norm")?;
    let apply = |x: &[f64]| {
        let mut y = vec![0.0; r];
        gemm(r, c, 1, w.data(), false, x, false, 0.0, &mut y);
        y
    };
    let apply_t = |y: &[f64]| {
        let mut x = vec![0.0; c];
        gemm(c, r, 1, w.data(), true, y, false, 0.0, &mut x);
        x
    };
    Ok(spectral_norm_power_iteration(apply, apply_t, c, opts))
}

/// Spectral norm of the bias-free linear map of a layer at its input shape.
/// `MaxMin` is 1-Lipschitz and reports exactly 1.
pub fn layer_spectral_norm(layer: &Layer, opts: PowerIteration) -> Result<f64> {
    if !layer.spec().is_linear() {
        return Ok(1.0);
    }
    let eff = layer.effective_weight()?;
    let in_shape = layer.input_shape().batched(1);
    let out_shape = layer.output_shape().batched(1);
    let apply = |x: &[f64]| {
        let t = Tensor::new(in_shape.clone(), x.to_vec()).expect("input shape");
        layer.apply_linear(&t, eff.as_ref()).expect("validated layer").into_data()
    };
    let apply_t = |y: &[f64]| {
        let t = Tensor::new(out_shape.clone(), y.to_vec()).expect("output shape");
        layer.apply_transpose(&t, eff.as_ref()).expect("validated layer").into_data()
    };
    Ok(spectral_norm_power_iteration(apply, apply_t, layer.input_shape().numel(), opts))
}

/// Bias-free Jacobian `out_dim × in_dim` of a linear layer; column `j` is
/// the layer's linear part applied to `e_j`.
pub fn materialize_jacobian(layer: &Layer) -> Result<Tensor> {
    if !layer.spec().is_linear() {
        return Err(Error::Nonlinear(layer.spec().kind().into()));
    }
    let (din, dout) = (layer.input_shape().numel(), layer.output_shape().numel());
    if din.max(dout) > JACOBIAN_LIMIT {
        return Err(Error::JacobianTooLarge {
            dim: din.max(dout),
            limit: JACOBIAN_LIMIT,
        });
    }
    let eff = layer.effective_weight()?;
    const CHUNK: usize = 256;
    let starts: Vec<usize> = (0..din).step_by(CHUNK).collect();
    let columns = starts
        .par_iter()
        .map(|&s| {
            let b = CHUNK.min(din - s);
            let mut basis = Tensor::zeros(&layer.input_shape().batched(b));
            for k in 0..b {
                basis.data_mut()[k * din + s + k] = 1.0;
            }
            layer.apply_linear(&basis, eff.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut j = Tensor::zeros(&[dout, din]);
    for (&s, cols) in starts.iter().zip(&columns) {
        for (k, col) in cols.data().chunks_exact(dout).enumerate() {
            for (r, &v) in col.iter().enumerate() {
                j.data_mut()[r * din + s + k] = v;
            }
        }
    }
    Ok(j)
}

/// Summary of `G = JᵀJ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GramStats {
    #[serde(skip)]
    pub gram: Tensor,
    pub diag_mean: f64,
    pub diag_min: f64,
    pub diag_max: f64,
    pub offdiag_mean_abs: f64,
    pub offdiag_max_abs: f64,
    /// `offdiag_mean_abs / diag_mean`; zero for an isometry.
    pub orthogonality_ratio: f64,
}

/// Statistics of `JᵀJ` for a materialized Jacobian.
pub fn gram_stats(jacobian: &Tensor) -> Result<GramStats> {
    let (r, c) = jacobian.as_matrix("gram_stats")?;
    let mut gram = Tensor::zeros(&[c, c]);
    gemm(c, r, c, jacobian.data(), true, jacobian.data(), false, 0.0, gram.data_mut());
    let g = gram.data();
    let diag: Vec<f64> = (0..c).map(|i| g[i * c + i]).collect();
    let diag_mean = diag.iter().sum::<f64>() / c as f64;
    let (mut off_sum, mut off_max) = (0.0, 0.0f64);
    for i in 0..c {
        for j in (0..c).filter(|&j| j != i) {
            off_sum += g[i * c + j].abs();
            off_max = off_max.max(g[i * c + j].abs());
        }
    }
    let off_count = (c * c - c).max(1) as f64;
    let offdiag_mean_abs = off_sum / off_count;
    Ok(GramStats {
        diag_mean,
        diag_min: diag.iter().copied().fold(f64::INFINITY, f64::min),
        diag_max: diag.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        offdiag_mean_abs,
        offdiag_max_abs: off_max,
        orthogonality_ratio: if diag_mean > 0.0 {
            offdiag_mean_abs / diag_mean
        } else {
            f64::INFINITY
        },
        gram,
    })
}

pub fn gram_analysis(layer: &Layer) -> Result<GramStats> {
    gram_stats(&materialize_jacobian(layer)?)
}

/// Writes square crops of the Gram matrix as `row,col,value` CSV files: one
/// centred crop and one per extra offset (relative to the centre crop's
/// top-left corner). Returns the written paths.
pub fn write_gram_crops(gram: &Tensor, dir: &Path, size: usize, offsets: &[(isize, isize)]) -> Result<Vec<PathBuf>> {
    let (n, _) = gram.as_matrix("write_gram_crops")?;
    let size = size.min(n);
    let centre = ((n - size) / 2) as isize;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let crops = std::iter::once((0, 0)).chain(offsets.iter().copied());
    for (k, (dr, dc)) in crops.enumerate() {
        let clampf = |v: isize| v.clamp(0, (n - size) as isize) as usize;
        let (r0, c0) = (clampf(centre + dr), clampf(centre + dc));
        let name = if k == 0 {
            "gram_center.csv".to_string()
        } else {
            format!("gram_offset{k}.csv")
        };
        let path = dir.join(name);
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(out, "row,col,value")?;
        for r in r0..r0 + size {
            for c in c0..c0 + size {
                writeln!(out, "{r},{c},{}", gram.data()[r * n + c])?;
            }
        }
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBound {
    pub index: usize,
    pub kind: String,
    pub sigma_max: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundAudit {
    pub layers: Vec<LayerBound>,
    /// Product of the per-layer bounds: an upper bound on the model's
    /// Lipschitz constant.
    pub product: f64,
}

impl BoundAudit {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| !l.flagged)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "index,kind,sigma_max,flagged")?;
        for l in &self.layers {
            writeln!(out, "{},{},{},{}", l.index, l.kind, l.sigma_max, l.flagged)?;
        }
        Ok(())
    }
}

/// Power-iteration spectral norm of every layer, flagging any above
/// `1 + 1e-9`.
pub fn audit_model_bound(model: &Model, opts: PowerIteration) -> Result<BoundAudit> {
    let layers = model
        .layers()
        .par_iter()
        .enumerate()
        .map(|(index, layer)| {
            let sigma = layer_spectral_norm(layer, opts).map_err(|e| crate::layers::wrap(index, layer, e))?;
            Ok(LayerBound {
                index,
                kind: layer.spec().kind().into(),
                sigma_max: sigma,
                flagged: sigma > 1.0 + BOUND_TOLERANCE,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let product = layers.iter().map(|l| l.sigma_max).product();
    Ok(BoundAudit { layers, product })
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub layer: usize,
    /// 0 for the weight, 1 for the bias.
    pub tensor: usize,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub coordinates: usize,
    pub step: f64,
    /// Denominator floor in the relative error.
    pub floor: f64,
    pub seed: u64,
    pub loss_offset: f64,
    pub loss_temperature: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coordinates: 50,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
            loss_offset: std::f64::consts::SQRT_2,
            loss_temperature: 0.25,
        }
    }
}

/// Compares backprop gradients with central differences on randomly
/// sampled parameter coordinates.
pub fn gradcheck(model: &Model, x: &Tensor, labels: &[usize], opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (u, t) = (opts.loss_offset, opts.loss_temperature);
    let (_, grads, _) = loss_and_grad(model, x, labels, u, t)?;
    let analytic: Vec<&Tensor> = grads.tensors().collect();
    // (layer, tensor) for every parameter tensor in order
    let owners: Vec<(usize, usize)> = model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.params.is_some())
        .flat_map(|(i, _)| [(i, 0), (i, 1)])
        .collect();
    let sizes: Vec<usize> = model.params().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picks = sample(&mut rng, total, opts.coordinates.min(total)).into_vec();
    let entries = picks
        .par_iter()
        .map(|&flat| {
            let (mut k, mut off) = (0, flat);
            while off >= sizes[k] {
                off -= sizes[k];
                k += 1;
            }
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().nth(k).expect("param index").data_mut()[off] += delta;
                loss(&m, x, labels, u, t)
            };
            let numeric = (eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step);
            let a = analytic[k].data()[off];
            Ok(GradCheckEntry {
                layer: owners[k].0,
                tensor: owners[k].1,
                offset: off,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, opts.floor),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_error })
}

/// Indices of the convolution layers.
pub fn conv_layer_indices(model: &Model) -> Vec<usize> {
    model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.spec(), LayerSpec::AolConv { .. } | LayerSpec::Conv { .. }))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{build_model, LinearParams, ModelSpec, Shape};
    use crate::tensor::{matmul, Padding};
    use nalgebra::DMatrix;
    use rand::Rng;

    #[test]
    fn power_iteration_on_diagonal_and_identity() {
        let d = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        assert!((matrix_spectral_norm(&d, PowerIteration::default()).unwrap() - 3.0).abs() < 1e-10);
        let id = Tensor::eye(7);
        assert_eq!(matrix_spectral_norm(&id, PowerIteration::default()).unwrap(), 1.0);
        let z = Tensor::zeros(&[3, 4]);
        assert_eq!(matrix_spectral_norm(&z, PowerIteration::default()).unwrap(), 0.0);
    }

    #[test]
    fn power_iteration_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::from_fn(&[50, 30], |_| StandardNormal.sample(&mut rng));
        let opts = PowerIteration {
            iters: 5000,
            ..Default::default()
        };
        let est = matrix_spectral_norm(&w, opts).unwrap();
        let gram = matmul(&w.transpose().unwrap(), &w).unwrap();
        let m = DMatrix::from_row_slice(30, 30, gram.data());
        let top = m.symmetric_eigenvalues().max().sqrt();
        assert!((est - top).abs() < 1e-8, "{est} vs {top}");
    }

    fn random_layer(spec: LayerSpec, shape: Shape, seed: u64) -> Layer {
        let mut layer = Layer::new(spec, shape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(p) = layer.params.as_mut() {
            p.weight = Tensor::from_fn(p.weight.shape(), |_| rng.random_range(-1.0..1.0));
            p.bias = Tensor::from_fn(p.bias.shape(), |_| rng.random_range(-1.0..1.0));
        }
        layer
    }

    #[test]
    fn fc_jacobian_is_the_weight() {
        let layer = random_layer(LayerSpec::AolFc { out_dim: 5 }, Shape::Flat(7), 1);
        let j = materialize_jacobian(&layer).unwrap();
        let w = layer.effective_weight().unwrap().unwrap();
        assert_eq!(&j, w.weight());
    }

    #[test]
    fn conv_jacobian_reproduces_forward() {
        let spec = LayerSpec::AolConv {
            kernel_size: 3,
            stride: 2,
            out_channels: 3,
            padding: Padding::SameZero,
        };
        let shape = Shape::Image {
            height: 8,
            width: 8,
            channels: 2,
        };
        let layer = random_layer(spec, shape, 2);
        let j = materialize_jacobian(&layer).unwrap();
        let bias_only = layer.forward(&Tensor::zeros(&shape.batched(1))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = Tensor::from_fn(&shape.batched(1), |_| rng.random_range(-1.0..1.0));
            let y = layer.forward(&x).unwrap().sub(&bias_only).unwrap();
            let jx = crate::tensor::matvec(&j, x.data()).unwrap();
            let err = jx.iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12);
        }
    }

    #[test]
    fn nonlinear_and_oversized_layers_are_rejected() {
        let mm = Layer::new(LayerSpec::MaxMin, Shape::Flat(4)).unwrap();
        assert!(matches!(materialize_jacobian(&mm), Err(Error::Nonlinear(_))));
        let big = Layer::new(LayerSpec::Flatten, Shape::Flat(10_001)).unwrap();
        assert!(matches!(materialize_jacobian(&big), Err(Error::JacobianTooLarge { .. })));
    }

    #[test]
    fn orthogonal_layer_gram_is_identity() {
        let spec = ModelSpec {
            input_shape: Shape::Flat(16),
            layers: vec![LayerSpec::AolFc { out_dim: 24 }],
        };
        let model = build_model(&spec, 8).unwrap();
        let stats = gram_analysis(&model.layers()[0]).unwrap();
        assert!(stats.orthogonality_ratio < 1e-9);
        assert!((stats.diag_mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn doubled_delta_kernel_rescales_to_isometry() {
        let spec = LayerSpec::AolConv {
            kernel_size: 3,
            stride: 1,
            out_channels: 2,
            padding: Padding::SameZero,
        };
        let shape = Shape::Image {
            height: 5,
            width: 5,
            channels: 2,
        };
        let mut layer = Layer::new(spec, shape).unwrap();
        let mut w = Tensor::zeros(&[3, 3, 2, 2]);
        w.set(&[1, 1, 0, 0], 2.0);
        w.set(&[1, 1, 1, 1], 2.0);
        layer
            .set_params(LinearParams {
                weight: w,
                bias: Tensor::zeros(&[2]),
            })
            .unwrap();
        let stats = gram_analysis(&layer).unwrap();
        assert!(stats.gram.max_abs_diff(&Tensor::eye(50)) < 1e-15);
    }

    #[test]
    fn gram_is_symmetric_with_nonnegative_diagonal() {
        let layer = random_layer(
            LayerSpec::Conv {
                kernel_size: 2,
                stride: 1,
                out_channels: 3,
                padding: Padding::Maximal,
            },
            Shape::Image {
                height: 4,
                width: 4,
                channels: 2,
            },
            6,
        );
        let stats = gram_analysis(&layer).unwrap();
        assert!(stats.gram.max_abs_diff(&stats.gram.transpose().unwrap()) < 1e-10);
        assert!(stats.diag_min >= 0.0);
    }

    #[test]
    fn crops_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let g = Tensor::from_fn(&[10, 10], |i| i as f64);
        let paths = write_gram_crops(&g, dir.path(), 4, &[(-3, -3), (2, 0)]).unwrap();
        assert_eq!(paths.len(), 3);
        let centre = std::fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(centre.lines().count(), 17);
        assert_eq!(centre.lines().nth(1).unwrap(), "3,3,33");
    }

    #[test]
    fn audit_flags_raw_layer() {
        let spec = ModelSpec {
            input_shape: Shape::Flat(4),
            layers: vec![
                LayerSpec::AolFc { out_dim: 4 },
                LayerSpec::MaxMin,
                LayerSpec::Dense { out_dim: 4 },
            ],
        };
        let mut model = build_model(&spec, 0).unwrap();
        let audit = audit_model_bound(&model, PowerIteration::default()).unwrap();
        assert!(audit.passed());
        model.layers_mut()[2]
            .set_params(LinearParams {
                weight: Tensor::eye(4).scale(1.5),
                bias: Tensor::zeros(&[4]),
            })
            .unwrap();
        let audit = audit_model_bound(&model, PowerIteration::default()).unwrap();
        assert!(!audit.passed());
        assert!(audit.layers[2].flagged && !audit.layers[0].flagged);
        assert!((audit.product - 1.5).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
