//! Dense row-major `f64` tensors with the handful of kernels the rest of the
//! crate needs: GEMM, 2-D cross-correlation (forward, input-gradient and
//! kernel-gradient) and a few reductions.
//!
//! Image tensors use `h × w × c` layout (channels fastest). Batched image
//! tensors put the batch index first. Convolution kernels are stored as
//! `k × k × c_in × c_out`, and the convolution convention is
//! cross-correlation:
//!
//! ```text
//! out[i, j, b] = Σ_{p,q,a} P[p, q, a, b] · x̃[i·s + p, j·s + q, a]
//! ```
//!
//! where `x̃` is the zero-padded input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("Tensor::new", format!("dimensions must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// `n × n` identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Row-major matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, format!("expected a 2-D matrix, got shape {:?}", self.shape))),
        }
    }

    /// Splits off the leading (batch) axis: returns `(batch, per-item length)`.
    pub(crate) fn batch_split(&self) -> (usize, usize) {
        let b = self.shape[0];
        (b, self.data.len() / b)
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let (_, per) = self.batch_split();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * per..end * per].to_vec(),
        }
    }

    /// Gathers items of the leading axis in the given order.
    pub fn gather_batch(&self, indices: &[usize]) -> Tensor {
        let (_, per) = self.batch_split();
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor { shape, data }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// `C = op(A)·op(B) + beta·C` on row-major slices, where `op(A)` is `m × k`
/// and `op(B)` is `k × n`. A transposed operand is stored in its
/// untransposed row-major form.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index formed from the given
    // dimensions and strides stays inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of an `n × m` and an `m × p` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, m) = a.as_matrix("matmul")?;
    let (m2, p) = b.as_matrix("matmul")?;
    if m != m2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[n, p]);
    gemm(n, m, p, &a.data, false, &b.data, false, 0.0, &mut out.data);
    Ok(out)
}

/// Matrix-vector product `A·x`.
pub fn matvec(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (n, m) = a.as_matrix("matvec")?;
    if x.len() != m {
        return Err(Error::ShapeMismatch {
            op: "matvec",
            left: a.shape.clone(),
            right: vec![x.len()],
        });
    }
    let mut out = vec![0.0; n];
    gemm(n, m, 1, &a.data, false, x, false, 0.0, &mut out);
    Ok(out)
}

/// Transposed matrix-vector product `Aᵀ·y`.
pub fn matvec_t(a: &Tensor, y: &[f64]) -> Result<Vec<f64>> {
    let (n, m) = a.as_matrix("matvec_t")?;
    if y.len() != n {
        return Err(Error::ShapeMismatch {
            op: "matvec_t",
            left: a.shape.clone(),
            right: vec![y.len()],
        });
    }
    let mut out = vec![0.0; m];
    gemm(m, n, 1, &a.data, true, y, false, 0.0, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding that keeps the spatial size at stride 1. Even kernels
    /// pad `⌊(k−1)/2⌋` before and `⌈(k−1)/2⌉` after.
    #[default]
    SameZero,
    Valid,
    /// `k − 1` zeros on every side.
    Maximal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn new(kernel_size: usize, stride: usize, padding: Padding, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel_size,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    /// Zero padding `(before, after)` applied on each spatial axis.
    pub fn pads(&self) -> (usize, usize) {
        let k = self.kernel_size;
        match self.padding {
            Padding::SameZero => ((k - 1) / 2, k - 1 - (k - 1) / 2),
            Padding::Valid => (0, 0),
            Padding::Maximal => (k - 1, k - 1),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel_size == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape("conv2d", format!("degenerate geometry {self:?}")));
        }
        let (before, after) = self.pads();
        let (ph, pw) = (h + before + after, w + before + after);
        if ph < self.kernel_size || pw < self.kernel_size {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {ph}×{pw} smaller than kernel {}", self.kernel_size),
            ));
        }
        Ok((
            (ph - self.kernel_size) / self.stride + 1,
            (pw - self.kernel_size) / self.stride + 1,
        ))
    }

    fn check_kernel(&self, kernel: &Tensor) -> Result<()> {
        let k = self.kernel_size;
        let expected = [k, k, self.in_channels, self.out_channels];
        if kernel.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel",
                left: kernel.shape().to_vec(),
                right: expected.to_vec(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        match x.shape()[..] {
            [b, h, w, c] if c == self.in_channels => Ok((b, h, w)),
            [_, _, _, c] => Err(Error::ShapeMismatch {
                op: "conv2d channels",
                left: vec![c],
                right: vec![self.in_channels],
            }),
            _ => Err(Error::shape(
                "conv2d",
                format!("expected batch × h × w × c input, got {:?}", x.shape()),
            )),
        }
    }
}

/// Unfolds a batched image into patch rows: one row per output position,
/// `k·k·c_in` columns ordered `(p, q, a)` to match the kernel layout.
fn im2col(x: &[f64], batch: usize, h: usize, w: usize, geom: &ConvGeometry, oh: usize, ow: usize) -> Vec<f64> {
    let k = geom.kernel_size;
    let c = geom.in_channels;
    let s = geom.stride;
    let (pad, _) = geom.pads();
    let cols = k * k * c;
    let mut out = vec![0.0; batch * oh * ow * cols];
    for b in 0..batch {
        let img = &x[b * h * w * c..(b + 1) * h * w * c];
        for oi in 0..oh {
            for oj in 0..ow {
                let row = ((b * oh + oi) * ow + oj) * cols;
                for p in 0..k {
                    let ii = (oi * s + p) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for q in 0..k {
                        let jj = (oj * s + q) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let src = (ii as usize * w + jj as usize) * c;
                        let dst = row + (p * k + q) * c;
                        out[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the image grid.
fn col2im(cols_data: &[f64], batch: usize, h: usize, w: usize, geom: &ConvGeometry, oh: usize, ow: usize) -> Vec<f64> {
    let k = geom.kernel_size;
    let c = geom.in_channels;
    let s = geom.stride;
    let (pad, _) = geom.pads();
    let cols = k * k * c;
    let mut out = vec![0.0; batch * h * w * c];
    for b in 0..batch {
        let img = &mut out[b * h * w * c..(b + 1) * h * w * c];
        for oi in 0..oh {
            for oj in 0..ow {
                let row = ((b * oh + oi) * ow + oj) * cols;
                for p in 0..k {
                    let ii = (oi * s + p) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for q in 0..k {
                        let jj = (oj * s + q) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let dst = (ii as usize * w + jj as usize) * c;
                        let src = row + (p * k + q) * c;
                        for (o, v) in img[dst..dst + c].iter_mut().zip(&cols_data[src..src + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation of a single `h × w × c_in` image.
pub fn conv2d(x: &Tensor, kernel: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let mut shape = vec![1];
    match x.shape()[..] {
        [_, _, _] => shape.extend_from_slice(x.shape()),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("expected h × w × c input, got {:?}", x.shape()),
            ))
        }
    }
    let batched = x.clone().reshape(&shape)?;
    let out = conv2d_batched(&batched, kernel, geom)?;
    let out_shape = out.shape()[1..].to_vec();
    out.reshape(&out_shape)
}

/// Cross-correlation of a `batch × h × w × c_in` tensor.
pub fn conv2d_batched(x: &Tensor, kernel: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    geom.check_kernel(kernel)?;
    let (batch, h, w) = geom.check_input(x)?;
    let (oh, ow) = geom.output_size(h, w)?;
    let kk = geom.kernel_size * geom.kernel_size * geom.in_channels;
    let cols = im2col(x.data(), batch, h, w, geom, oh, ow);
    let rows = batch * oh * ow;
    let mut out = Tensor::zeros(&[batch, oh, ow, geom.out_channels]);
    gemm(rows, kk, geom.out_channels, &cols, false, kernel.data(), false, 0.0, out.data_mut());
    Ok(out)
}

/// Transpose (adjoint) of the batched convolution with respect to its input:
/// maps an output-shaped tensor back to `batch × h × w × c_in`.
pub fn conv2d_input_grad(dy: &Tensor, kernel: &Tensor, geom: &ConvGeometry, h: usize, w: usize) -> Result<Tensor> {
    geom.check_kernel(kernel)?;
    let (oh, ow) = geom.output_size(h, w)?;
    let batch = match dy.shape()[..] {
        [b, a, c, d] if a == oh && c == ow && d == geom.out_channels => b,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d_input_grad",
                left: dy.shape().to_vec(),
                right: vec![dy.shape()[0], oh, ow, geom.out_channels],
            })
        }
    };
    let kk = geom.kernel_size * geom.kernel_size * geom.in_channels;
    let rows = batch * oh * ow;
    let mut dcols = vec![0.0; rows * kk];
    gemm(rows, geom.out_channels, kk, dy.data(), false, kernel.data(), true, 0.0, &mut dcols);
    let dx = col2im(&dcols, batch, h, w, geom, oh, ow);
    Tensor::new(vec![batch, h, w, geom.in_channels], dx)
}

/// Gradient of `⟨dy, conv(x, P)⟩` with respect to the kernel `P`.
pub fn conv2d_kernel_grad(x: &Tensor, dy: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let (batch, h, w) = geom.check_input(x)?;
    let (oh, ow) = geom.output_size(h, w)?;
    if dy.shape() != [batch, oh, ow, geom.out_channels] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_kernel_grad",
            left: dy.shape().to_vec(),
            right: vec![batch, oh, ow, geom.out_channels],
        });
    }
    let k = geom.kernel_size;
    let kk = k * k * geom.in_channels;
    let rows = batch * oh * ow;
    let cols = im2col(x.data(), batch, h, w, geom, oh, ow);
    let mut dk = Tensor::zeros(&[k, k, geom.in_channels, geom.out_channels]);
    gemm(kk, rows, geom.out_channels, &cols, true, dy.data(), false, 0.0, dk.data_mut());
    Ok(dk)
}
