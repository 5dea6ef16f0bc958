//! AOL rescaling.
//!
//! For a parameter matrix `P ∈ R^{n×m}` the column scale
//! `D_ii = (Σ_j |PᵀP|_ij)^{-1/2}` (or `0` when the sum vanishes) guarantees
//! `‖P·D‖₂ ≤ 1`. For a convolution kernel `P ∈ R^{k×k×c_in×c_out}` the same
//! argument applied to the convolution's Jacobian gives one factor per input
//! channel,
//!
//! ```text
//! d_c = ( Σ_{i,j} Σ_a | Σ_b P^(a,b) ⋆ P^(c,b) |_{i,j} )^{-1/2}
//! ```
//!
//! where `⋆` is the full 2-D cross-correlation of two `k × k` slices. Both
//! factors are differentiable in `P` away from zero entries of the Gram
//! terms, and the `backward` methods propagate gradients through them so
//! training sees the rescaling.

use crate::error::{Error, Result};
use crate::tensor::{conv2d_batched, gemm, ConvGeometry, Padding, Tensor};

/// Options for the rescale. The default keeps the exact zero branch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RescaleOptions {
    /// If set, row sums below this value are raised to it before the inverse
    /// square root. Only ever shrinks the factors, so the bound still holds.
    pub floor: Option<f64>,
}

fn inv_sqrt(sum: f64, opts: &RescaleOptions) -> f64 {
    match opts.floor {
        Some(eps) if sum < eps => 1.0 / eps.sqrt(),
        _ if sum == 0.0 => 0.0,
        _ => 1.0 / sum.sqrt(),
    }
}

/// `∂D/∂sum` for `D = sum^{-1/2}`; zero on the zero and floor branches.
fn inv_sqrt_grad(sum: f64, scale: f64, opts: &RescaleOptions) -> f64 {
    if sum == 0.0 || opts.floor.is_some_and(|eps| sum < eps) {
        0.0
    } else {
        -0.5 * scale * scale * scale
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Column rescaling of a fully-connected parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRescale {
    /// Diagonal of `D`, one entry per column of `P`.
    pub scale: Vec<f64>,
    /// Effective weight `W = P·diag(D)`.
    pub weight: Tensor,
    /// `PᵀP`.
    pub gram: Tensor,
    /// `Σ_j |PᵀP|_ij` per column.
    pub row_sums: Vec<f64>,
    options: RescaleOptions,
}

pub fn rescale_matrix(p: &Tensor) -> Result<MatrixRescale> {
    rescale_matrix_with(p, RescaleOptions::default())
}

pub fn rescale_matrix_with(p: &Tensor, options: RescaleOptions) -> Result<MatrixRescale> {
    let (n, m) = p.as_matrix("rescale_matrix")?;
    if !p.is_finite() {
        return Err(Error::NonFinite("rescale_matrix input".into()));
    }
    let mut gram = Tensor::zeros(&[m, m]);
    gemm(m, n, m, p.data(), true, p.data(), false, 0.0, gram.data_mut());
    let row_sums: Vec<f64> = gram.data().chunks(m).map(|row| row.iter().map(|v| v.abs()).sum()).collect();
    let scale: Vec<f64> = row_sums.iter().map(|&s| inv_sqrt(s, &options)).collect();
    let mut weight = p.clone();
    for row in weight.data_mut().chunks_mut(m) {
        for (w, d) in row.iter_mut().zip(&scale) {
            *w *= d;
        }
    }
    Ok(MatrixRescale {
        scale,
        weight,
        gram,
        row_sums,
        options,
    })
}

impl MatrixRescale {
    /// Given `∂L/∂W`, returns `∂L/∂P`, including the dependence of `D` on `P`.
    pub fn backward(&self, p: &Tensor, grad_weight: &Tensor) -> Result<Tensor> {
        let (n, m) = p.as_matrix("MatrixRescale::backward")?;
        if grad_weight.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "MatrixRescale::backward",
                left: grad_weight.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        let mut grad_p = grad_weight.clone();
        let mut grad_scale = vec![0.0; m];
        for (gp_row, p_row) in grad_p.data_mut().chunks_mut(m).zip(p.data().chunks(m)) {
            for i in 0..m {
                grad_scale[i] += gp_row[i] * p_row[i];
                gp_row[i] *= self.scale[i];
            }
        }
        let grad_sum: Vec<f64> = (0..m)
            .map(|i| grad_scale[i] * inv_sqrt_grad(self.row_sums[i], self.scale[i], &self.options))
            .collect();
        if grad_sum.iter().all(|&g| g == 0.0) {
            return Ok(grad_p);
        }
        // G[i,j] = g_i·sign(M_ij); ∂L/∂P += P·(G + Gᵀ)
        let mut sym = Tensor::zeros(&[m, m]);
        let gram = self.gram.data();
        for i in 0..m {
            for j in 0..m {
                let s = sign(gram[i * m + j]);
                sym.data_mut()[i * m + j] = s * (grad_sum[i] + grad_sum[j]);
            }
        }
        gemm(n, m, m, p.data(), false, sym.data(), false, 1.0, grad_p.data_mut());
        Ok(grad_p)
    }
}

/// Per-input-channel rescaling of a convolution kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRescale {
    /// `d_c`, one per input channel.
    pub scale: Vec<f64>,
    /// Effective kernel: `W[·,·,c,·] = d_c · P[·,·,c,·]`.
    pub weight: Tensor,
    /// Kernel self-correlation, shape `(2k−1) × (2k−1) × c_in × c_in`:
    /// `gram[i,j,a,c] = Σ_{p,q,b} P[p,q,a,b] · P[p+i−k+1, q+j−k+1, c, b]`.
    pub gram: Tensor,
    /// `Σ_{i,j,a} |gram[i,j,a,c]|` per input channel.
    pub channel_sums: Vec<f64>,
    options: RescaleOptions,
}

pub fn rescale_kernel(p: &Tensor) -> Result<KernelRescale> {
    rescale_kernel_with(p, RescaleOptions::default())
}

/// Kernel self-correlation computed as one maximally padded convolution in
/// which the input channels act as the batch: image `c` is the slice
/// `P[·,·,c,·]` (with `c_out` channels) and the filter bank is `P` with its
/// channel axes swapped.
pub fn kernel_gram(p: &Tensor) -> Result<Tensor> {
    let (k, c_in, c_out) = kernel_dims(p)?;
    let mut images = Tensor::zeros(&[c_in, k, k, c_out]);
    let mut filters = Tensor::zeros(&[k, k, c_out, c_in]);
    let src = p.data();
    for pq in 0..k * k {
        for a in 0..c_in {
            for b in 0..c_out {
                let v = src[(pq * c_in + a) * c_out + b];
                images.data_mut()[(a * k * k + pq) * c_out + b] = v;
                filters.data_mut()[(pq * c_out + b) * c_in + a] = v;
            }
        }
    }
    let geom = ConvGeometry::new(k, 1, Padding::Maximal, c_out, c_in);
    let batched = conv2d_batched(&images, &filters, &geom)?;
    // batched[c, i, j, a] -> gram[i, j, a, c]
    let g = 2 * k - 1;
    let mut gram = Tensor::zeros(&[g, g, c_in, c_in]);
    let bd = batched.data();
    let gd = gram.data_mut();
    for c in 0..c_in {
        for ij in 0..g * g {
            for a in 0..c_in {
                gd[(ij * c_in + a) * c_in + c] = bd[(c * g * g + ij) * c_in + a];
            }
        }
    }
    Ok(gram)
}

fn kernel_dims(p: &Tensor) -> Result<(usize, usize, usize)> {
    match p.shape()[..] {
        [k, k2, c_in, c_out] if k == k2 => Ok((k, c_in, c_out)),
        _ => Err(Error::shape(
            "rescale_kernel",
            format!("expected a k × k × c_in × c_out kernel, got {:?}", p.shape()),
        )),
    }
}

pub fn rescale_kernel_with(p: &Tensor, options: RescaleOptions) -> Result<KernelRescale> {
    let (_, c_in, _) = kernel_dims(p)?;
    if !p.is_finite() {
        return Err(Error::NonFinite("rescale_kernel input".into()));
    }
    let gram = kernel_gram(p)?;
    let mut channel_sums = vec![0.0; c_in];
    for (idx, v) in gram.data().iter().enumerate() {
        channel_sums[idx % c_in] += v.abs();
    }
    let scale: Vec<f64> = channel_sums.iter().map(|&s| inv_sqrt(s, &options)).collect();
    let weight = scale_input_channels(p, &scale);
    Ok(KernelRescale {
        scale,
        weight,
        gram,
        channel_sums,
        options,
    })
}

fn scale_input_channels(p: &Tensor, scale: &[f64]) -> Tensor {
    let shape = p.shape();
    let (c_in, c_out) = (shape[2], shape[3]);
    let mut out = p.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        *v *= scale[(idx / c_out) % c_in];
    }
    out
}

impl KernelRescale {
    /// Given `∂L/∂W` for the effective kernel, returns `∂L/∂P`.
    pub fn backward(&self, p: &Tensor, grad_weight: &Tensor) -> Result<Tensor> {
        let (k, c_in, c_out) = kernel_dims(p)?;
        if grad_weight.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "KernelRescale::backward",
                left: grad_weight.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        let mut grad_scale = vec![0.0; c_in];
        for (idx, (g, v)) in grad_weight.data().iter().zip(p.data()).enumerate() {
            grad_scale[(idx / c_out) % c_in] += g * v;
        }
        let mut grad_p = scale_input_channels(grad_weight, &self.scale);
        let grad_sum: Vec<f64> = (0..c_in)
            .map(|c| grad_scale[c] * inv_sqrt_grad(self.channel_sums[c], self.scale[c], &self.options))
            .collect();
        if grad_sum.iter().all(|&g| g == 0.0) {
            return Ok(grad_p);
        }
        let g = 2 * k - 1;
        let off = k as isize - 1;
        let pd = p.data();
        let gp = grad_p.data_mut();
        let gram = self.gram.data();
        let at = |p: usize, q: usize, a: usize| (p * k + q) * c_in * c_out + a * c_out;
        for i in 0..g {
            let di = i as isize - off;
            for j in 0..g {
                let dj = j as isize - off;
                for a in 0..c_in {
                    for c in 0..c_in {
                        let coeff = grad_sum[c] * sign(gram[((i * g + j) * c_in + a) * c_in + c]);
                        if coeff == 0.0 {
                            continue;
                        }
                        // gram[i,j,a,c] = Σ P[p,q,a,b]·P[p+di, q+dj, c, b]
                        for p in 0..k {
                            let pp = p as isize + di;
                            if pp < 0 || pp >= k as isize {
                                continue;
                            }
                            for q in 0..k {
                                let qq = q as isize + dj;
                                if qq < 0 || qq >= k as isize {
                                    continue;
                                }
                                let lhs = at(p, q, a);
                                let rhs = at(pp as usize, qq as usize, c);
                                for b in 0..c_out {
                                    gp[lhs + b] += coeff * pd[rhs + b];
                                    gp[rhs + b] += coeff * pd[lhs + b];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_p)
    }
}
