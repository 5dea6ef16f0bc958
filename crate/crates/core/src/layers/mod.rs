//! Layer zoo and sequential models.
//!
//! All activations are batched: an image batch is `batch × h × w × c`, a flat
//! batch is `batch × n`. Channel-wise layers (`MaxMin`, `FirstChannels`)
//! act on the last axis of either form.

mod init;
pub mod presets;

use serde::{Deserialize, Serialize};

pub use init::{build_model, init_identity, init_orthogonal, is_size_preserving, random_orthonormal};

use crate::error::{Error, Result};
use crate::rescale::{rescale_kernel, rescale_matrix, KernelRescale, MatrixRescale};
use crate::tensor::{conv2d_batched, conv2d_input_grad, conv2d_kernel_grad, gemm, ConvGeometry, Padding, Tensor};

/// Shape of a single example (no batch axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub enum Shape {
    Image { height: usize, width: usize, channels: usize },
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Image { height, width, channels } => height * width * channels,
            Shape::Flat(n) => n,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Image { height, width, channels } => vec![height, width, channels],
            Shape::Flat(n) => vec![n],
        }
    }

    /// Size of the last axis.
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Image { channels, .. } => channels,
            Shape::Flat(n) => n,
        }
    }

    /// Same shape with the last axis replaced.
    fn with_channels(&self, c: usize) -> Shape {
        match *self {
            Shape::Image { height, width, .. } => Shape::Image { height, width, channels: c },
            Shape::Flat(_) => Shape::Flat(c),
        }
    }

    /// Shape of a batch of `batch` examples.
    pub fn batched(&self, batch: usize) -> Vec<usize> {
        let mut dims = vec![batch];
        dims.extend(self.dims());
        dims
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = String;

    fn try_from(dims: Vec<usize>) -> std::result::Result<Self, String> {
        if dims.contains(&0) {
            return Err(format!("shape dimensions must be positive, got {dims:?}"));
        }
        match dims[..] {
            [n] => Ok(Shape::Flat(n)),
            [height, width, channels] => Ok(Shape::Image { height, width, channels }),
            _ => Err(format!("expected [n] or [h, w, c], got {dims:?}")),
        }
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.dims()
    }
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Convolution with AOL channel rescaling.
    AolConv {
        kernel_size: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        out_channels: usize,
        #[serde(default)]
        padding: Padding,
    },
    /// Fully-connected layer with AOL column rescaling.
    AolFc { out_dim: usize },
    /// Unconstrained convolution (no rescaling, no Lipschitz guarantee).
    Conv {
        kernel_size: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        out_channels: usize,
        #[serde(default)]
        padding: Padding,
    },
    /// Unconstrained fully-connected layer.
    Dense { out_dim: usize },
    /// `(max, min)` of consecutive channel pairs.
    MaxMin,
    /// Space-to-depth: each `patch × patch` block becomes one pixel.
    ConcatPool { patch: usize },
    /// Keeps the first `n` channels.
    FirstChannels { n: usize },
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::AolConv { .. } => "aol_conv",
            LayerSpec::AolFc { .. } => "aol_fc",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::MaxMin => "max_min",
            LayerSpec::ConcatPool { .. } => "concat_pool",
            LayerSpec::FirstChannels { .. } => "first_channels",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Layers with a weight and bias.
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::AolConv { .. } | LayerSpec::AolFc { .. } | LayerSpec::Conv { .. } | LayerSpec::Dense { .. }
        )
    }

    /// Parameter layers whose weight goes through the AOL rescale.
    pub fn is_rescaled(&self) -> bool {
        matches!(self, LayerSpec::AolConv { .. } | LayerSpec::AolFc { .. })
    }

    /// Affine in its input (everything except `MaxMin`).
    pub fn is_linear(&self) -> bool {
        !matches!(self, LayerSpec::MaxMin)
    }

    /// The same layer without the Lipschitz constraint.
    pub fn unconstrained(&self) -> LayerSpec {
        match *self {
            LayerSpec::AolConv {
                kernel_size,
                stride,
                out_channels,
                padding,
            } => LayerSpec::Conv {
                kernel_size,
                stride,
                out_channels,
                padding,
            },
            LayerSpec::AolFc { out_dim } => LayerSpec::Dense { out_dim },
            other => other,
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let bad = |reason: String| Err(Error::InvalidSpec(format!("{}: {reason}", self.kind())));
        match (*self, input) {
            (
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
                },
                Shape::Image { height, width, channels },
            ) => {
                let geom = ConvGeometry::new(kernel_size, stride, padding, channels, out_channels);
                let (h, w) = geom
                    .output_size(height, width)
                    .map_err(|e| Error::InvalidSpec(format!("{}: {e}", self.kind())))?;
                Ok(Shape::Image {
                    height: h,
                    width: w,
                    channels: out_channels,
                })
            }
            (LayerSpec::AolConv { .. } | LayerSpec::Conv { .. }, Shape::Flat(_)) => {
                bad("convolution needs an image input".into())
            }
            (LayerSpec::AolFc { out_dim } | LayerSpec::Dense { out_dim }, Shape::Flat(_)) => {
                if out_dim == 0 {
                    return bad("out_dim must be positive".into());
                }
                Ok(Shape::Flat(out_dim))
            }
            (LayerSpec::AolFc { .. } | LayerSpec::Dense { .. }, Shape::Image { .. }) => {
                bad("fully-connected layer needs a flat input (add a flatten layer)".into())
            }
            (LayerSpec::MaxMin, s) => {
                if s.channels() % 2 != 0 {
                    return bad(format!("needs an even channel count, got {}", s.channels()));
                }
                Ok(s)
            }
            (LayerSpec::ConcatPool { patch }, Shape::Image { height, width, channels }) => {
                if patch == 0 || height % patch != 0 || width % patch != 0 {
                    return bad(format!("patch {patch} does not tile {height}×{width}"));
                }
                Ok(Shape::Image {
                    height: height / patch,
                    width: width / patch,
                    channels: patch * patch * channels,
                })
            }
            (LayerSpec::ConcatPool { .. }, Shape::Flat(_)) => bad("needs an image input".into()),
            (LayerSpec::FirstChannels { n }, s) => {
                if n == 0 || n > s.channels() {
                    return bad(format!("cannot keep {n} of {} channels", s.channels()));
                }
                Ok(s.with_channels(n))
            }
            (LayerSpec::Flatten, s) => Ok(Shape::Flat(s.numel())),
        }
    }
}

/// Declarative model: input shape plus an ordered layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Shapes before the first layer and after each layer.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("model has no layers".into()));
        }
        let mut shapes = vec![self.input_shape];
        for (index, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(shapes[index]).map_err(|e| Error::Layer {
                index,
                kind: layer.kind().into(),
                source: Box::new(e),
            })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.infer_shapes().map(|_| ())
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(*self.infer_shapes()?.last().expect("non-empty"))
    }

    /// Copy with every AOL layer replaced by its unconstrained counterpart.
    pub fn unconstrained(&self) -> ModelSpec {
        ModelSpec {
            input_shape: self.input_shape,
            layers: self.layers.iter().map(LayerSpec::unconstrained).collect(),
        }
    }
}

/// Raw trainable parameters of a linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `P`: `out × in` for dense layers, `k × k × c_in × c_out` for convolutions.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Weight actually applied by a layer.
#[derive(Debug, Clone)]
pub enum EffectiveWeight {
    Matrix(MatrixRescale),
    Kernel(KernelRescale),
    Raw(Tensor),
}

impl EffectiveWeight {
    pub fn weight(&self) -> &Tensor {
        match self {
            EffectiveWeight::Matrix(r) => &r.weight,
            EffectiveWeight::Kernel(r) => &r.weight,
            EffectiveWeight::Raw(w) => w,
        }
    }

    /// Maps `∂L/∂W` to `∂L/∂P`.
    pub fn backward(&self, p: &Tensor, grad_weight: Tensor) -> Result<Tensor> {
        match self {
            EffectiveWeight::Matrix(r) => r.backward(p, &grad_weight),
            EffectiveWeight::Kernel(r) => r.backward(p, &grad_weight),
            EffectiveWeight::Raw(_) => Ok(grad_weight),
        }
    }
}

/// One layer with its resolved input/output shapes and (if any) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    input_shape: Shape,
    output_shape: Shape,
    pub params: Option<LinearParams>,
}

impl Layer {
    /// Creates the layer with zero-valued parameters.
    pub fn new(spec: LayerSpec, input_shape: Shape) -> Result<Self> {
        let output_shape = spec.output_shape(input_shape)?;
        let params = spec.has_params().then(|| {
            let (w, b) = param_shapes(&spec, input_shape);
            LinearParams {
                weight: Tensor::zeros(&w),
                bias: Tensor::zeros(&b),
            }
        });
        Ok(Self {
            spec,
            input_shape,
            output_shape,
            params,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        self.output_shape
    }

    pub fn geometry(&self) -> Option<ConvGeometry> {
        match self.spec {
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
            } => Some(ConvGeometry::new(
                kernel_size,
                stride,
                padding,
                self.input_shape.channels(),
                out_channels,
            )),
            _ => None,
        }
    }

    fn params_ref(&self) -> Result<&LinearParams> {
        self.params
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec(format!("{} layer has no parameters", self.spec.kind())))
    }

    /// Sets parameters after checking their shapes.
    pub fn set_params(&mut self, params: LinearParams) -> Result<()> {
        if !self.spec.has_params() {
            return Err(Error::InvalidSpec(format!("{} layer takes no parameters", self.spec.kind())));
        }
        let (w, b) = param_shapes(&self.spec, self.input_shape);
        for (got, want) in [(params.weight.shape(), &w), (params.bias.shape(), &b)] {
            if got != want.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "set_params",
                    left: got.to_vec(),
                    right: want.clone(),
                });
            }
        }
        self.params = Some(params);
        Ok(())
    }

    /// Weight applied in the forward pass (rescaled for AOL layers).
    pub fn effective_weight(&self) -> Result<Option<EffectiveWeight>> {
        if !self.spec.has_params() {
            return Ok(None);
        }
        let p = &self.params_ref()?.weight;
        Ok(Some(match self.spec {
            LayerSpec::AolFc { .. } => EffectiveWeight::Matrix(rescale_matrix(p)?),
            LayerSpec::AolConv { .. } => EffectiveWeight::Kernel(rescale_kernel(p)?),
            _ => EffectiveWeight::Raw(p.clone()),
        }))
    }

    fn check_batch(&self, x: &Tensor) -> Result<usize> {
        let batch = x.shape().first().copied().unwrap_or(0);
        if batch == 0 || x.shape()[1..] != self.input_shape.dims()[..] {
            return Err(Error::ShapeMismatch {
                op: "layer input",
                left: x.shape().to_vec(),
                right: self.input_shape.batched(batch.max(1)),
            });
        }
        Ok(batch)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let eff = self.effective_weight()?;
        self.apply(x, eff.as_ref())
    }

    /// Forward pass using a precomputed effective weight.
    pub fn apply(&self, x: &Tensor, eff: Option<&EffectiveWeight>) -> Result<Tensor> {
        self.apply_inner(x, eff, true)
    }

    /// Forward pass without the bias: the linear part of an affine layer.
    pub fn apply_linear(&self, x: &Tensor, eff: Option<&EffectiveWeight>) -> Result<Tensor> {
        self.apply_inner(x, eff, false)
    }

    fn apply_inner(&self, x: &Tensor, eff: Option<&EffectiveWeight>, with_bias: bool) -> Result<Tensor> {
        let batch = self.check_batch(x)?;
        let out = self.output_shape.batched(batch);
        match self.spec {
            LayerSpec::AolConv { .. } | LayerSpec::Conv { .. } => {
                let w = need_weight(eff)?;
                let geom = self.geometry().expect("conv geometry");
                let mut y = conv2d_batched(x, w, &geom)?;
                if with_bias {
                    add_channel_bias(&mut y, &self.params_ref()?.bias);
                }
                Ok(y)
            }
            LayerSpec::AolFc { out_dim } | LayerSpec::Dense { out_dim } => {
                let w = need_weight(eff)?;
                let m = self.input_shape.numel();
                let mut y = Tensor::zeros(&out);
                gemm(batch, m, out_dim, x.data(), false, w.data(), true, 0.0, y.data_mut());
                if with_bias {
                    add_channel_bias(&mut y, &self.params_ref()?.bias);
                }
                Ok(y)
            }
            LayerSpec::MaxMin => {
                let mut y = x.clone();
                for pair in y.data_mut().chunks_exact_mut(2) {
                    if pair[0] < pair[1] {
                        pair.swap(0, 1);
                    }
                }
                Ok(y)
            }
            LayerSpec::ConcatPool { patch } => {
                let mut y = Tensor::zeros(&out);
                self.concat_pool_map(batch, patch, |src, dst| y.data_mut()[dst] = x.data()[src]);
                Ok(y)
            }
            LayerSpec::FirstChannels { n } => {
                let c = self.input_shape.channels();
                let data = x.data().chunks_exact(c).flat_map(|px| px[..n].iter().copied()).collect();
                Tensor::new(out, data)
            }
            LayerSpec::Flatten => x.clone().reshape(&out),
        }
    }

    /// Calls `f(src, dst)` for every element moved by concatenation pooling.
    fn concat_pool_map(&self, batch: usize, patch: usize, mut f: impl FnMut(usize, usize)) {
        let Shape::Image { height, width, channels } = self.input_shape else {
            unreachable!("validated at construction")
        };
        let (oh, ow) = (height / patch, width / patch);
        let oc = patch * patch * channels;
        for b in 0..batch {
            for i in 0..oh {
                for j in 0..ow {
                    for pi in 0..patch {
                        for pj in 0..patch {
                            let src = ((b * height + i * patch + pi) * width + j * patch + pj) * channels;
                            let dst = ((b * oh + i) * ow + j) * oc + (pi * patch + pj) * channels;
                            for c in 0..channels {
                                f(src + c, dst + c);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Reverse pass: given the layer input `x` and `∂L/∂y`, returns `∂L/∂x`
    /// and, for parameter layers, `∂L/∂P` and `∂L/∂b`.
    pub fn backward(
        &self,
        x: &Tensor,
        eff: Option<&EffectiveWeight>,
        dy: &Tensor,
    ) -> Result<(Tensor, Option<LinearParams>)> {
        let batch = self.check_batch(x)?;
        if dy.shape() != self.output_shape.batched(batch) {
            return Err(Error::ShapeMismatch {
                op: "layer backward",
                left: dy.shape().to_vec(),
                right: self.output_shape.batched(batch),
            });
        }
        match self.spec {
            LayerSpec::AolConv { .. } | LayerSpec::Conv { .. } => {
                let eff = eff.ok_or_else(|| Error::InvalidSpec("missing effective weight".into()))?;
                let geom = self.geometry().expect("conv geometry");
                let Shape::Image { height, width, .. } = self.input_shape else {
                    unreachable!()
                };
                let dx = conv2d_input_grad(dy, eff.weight(), &geom, height, width)?;
                let dw = conv2d_kernel_grad(x, dy, &geom)?;
                let params = self.params_ref()?;
                let dp = eff.backward(&params.weight, dw)?;
                Ok((dx, Some(LinearParams { weight: dp, bias: channel_sums(dy) })))
            }
            LayerSpec::AolFc { out_dim } | LayerSpec::Dense { out_dim } => {
                let eff = eff.ok_or_else(|| Error::InvalidSpec("missing effective weight".into()))?;
                let m = self.input_shape.numel();
                let mut dx = Tensor::zeros(&self.input_shape.batched(batch));
                gemm(batch, out_dim, m, dy.data(), false, eff.weight().data(), false, 0.0, dx.data_mut());
                let mut dw = Tensor::zeros(&[out_dim, m]);
                gemm(out_dim, batch, m, dy.data(), true, x.data(), false, 0.0, dw.data_mut());
                let params = self.params_ref()?;
                let dp = eff.backward(&params.weight, dw)?;
                Ok((dx, Some(LinearParams { weight: dp, bias: channel_sums(dy) })))
            }
            LayerSpec::MaxMin => {
                let mut dx = dy.clone();
                for (g, v) in dx.data_mut().chunks_exact_mut(2).zip(x.data().chunks_exact(2)) {
                    if v[0] < v[1] {
                        g.swap(0, 1);
                    }
                }
                Ok((dx, None))
            }
            _ => Ok((self.apply_transpose(dy, None)?, None)),
        }
    }

    /// Adjoint of the bias-free linear map of a linear layer.
    pub fn apply_transpose(&self, dy: &Tensor, eff: Option<&EffectiveWeight>) -> Result<Tensor> {
        let batch = dy.shape().first().copied().unwrap_or(0);
        if batch == 0 || dy.shape()[1..] != self.output_shape.dims()[..] {
            return Err(Error::ShapeMismatch {
                op: "layer transpose",
                left: dy.shape().to_vec(),
                right: self.output_shape.batched(batch.max(1)),
            });
        }
        let in_shape = self.input_shape.batched(batch);
        match self.spec {
            LayerSpec::AolConv { .. } | LayerSpec::Conv { .. } => {
                let geom = self.geometry().expect("conv geometry");
                let Shape::Image { height, width, .. } = self.input_shape else {
                    unreachable!()
                };
                conv2d_input_grad(dy, need_weight(eff)?, &geom, height, width)
            }
            LayerSpec::AolFc { out_dim } | LayerSpec::Dense { out_dim } => {
                let m = self.input_shape.numel();
                let mut dx = Tensor::zeros(&in_shape);
                gemm(batch, out_dim, m, dy.data(), false, need_weight(eff)?.data(), false, 0.0, dx.data_mut());
                Ok(dx)
            }
            LayerSpec::MaxMin => Err(Error::Nonlinear("max_min".into())),
            LayerSpec::ConcatPool { patch } => {
                let mut dx = Tensor::zeros(&in_shape);
                self.concat_pool_map(batch, patch, |src, dst| dx.data_mut()[src] = dy.data()[dst]);
                Ok(dx)
            }
            LayerSpec::FirstChannels { n } => {
                let c = self.input_shape.channels();
                let mut dx = Tensor::zeros(&in_shape);
                for (dst, src) in dx.data_mut().chunks_exact_mut(c).zip(dy.data().chunks_exact(n)) {
                    dst[..n].copy_from_slice(src);
                }
                Ok(dx)
            }
            LayerSpec::Flatten => dy.clone().reshape(&in_shape),
        }
    }
}

fn need_weight(eff: Option<&EffectiveWeight>) -> Result<&Tensor> {
    eff.map(EffectiveWeight::weight)
        .ok_or_else(|| Error::InvalidSpec("missing effective weight".into()))
}

fn param_shapes(spec: &LayerSpec, input: Shape) -> (Vec<usize>, Vec<usize>) {
    match *spec {
        LayerSpec::AolConv {
            kernel_size,
            out_channels,
            ..
        }
        | LayerSpec::Conv {
            kernel_size,
            out_channels,
            ..
        } => (
            vec![kernel_size, kernel_size, input.channels(), out_channels],
            vec![out_channels],
        ),
        LayerSpec::AolFc { out_dim } | LayerSpec::Dense { out_dim } => (vec![out_dim, input.numel()], vec![out_dim]),
        _ => (vec![], vec![]),
    }
}

fn add_channel_bias(y: &mut Tensor, bias: &Tensor) {
    let c = bias.len();
    for row in y.data_mut().chunks_exact_mut(c) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

fn channel_sums(dy: &Tensor) -> Tensor {
    let c = *dy.shape().last().expect("non-empty shape");
    let mut out = Tensor::zeros(&[c]);
    for row in dy.data().chunks_exact(c) {
        for (o, v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// A sequential network: a validated spec plus per-layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

impl Model {
    /// Instantiates the model spec with all parameters set to zero.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        let layers = spec
            .layers
            .iter()
            .zip(&shapes)
            .map(|(&l, &s)| Layer::new(l, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.spec.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        self.layers.last().expect("validated non-empty").output_shape
    }

    /// Number of classes (flat output size).
    pub fn num_outputs(&self) -> usize {
        self.output_shape().numel()
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    /// Parameter tensors in spec order: weight then bias of each parameter layer.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .flat_map(|p| [&p.weight, &p.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.params.as_mut())
            .flat_map(|p| [&mut p.weight, &mut p.bias])
    }

    pub fn effective_weights(&self) -> Result<Vec<Option<EffectiveWeight>>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.effective_weight().map_err(|e| wrap(i, l, e)))
            .collect()
    }

    /// Accepts either one example (shape == input shape) or a batch
    /// (`batch × input shape`), and returns output of the matching form.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let eff = self.effective_weights()?;
        self.forward_with(x, &eff)
    }

    pub fn forward_with(&self, x: &Tensor, eff: &[Option<EffectiveWeight>]) -> Result<Tensor> {
        let single = x.shape() == self.input_shape().dims();
        let mut h = if single {
            x.clone().reshape(&self.input_shape().batched(1))?
        } else {
            x.clone()
        };
        for (i, (layer, e)) in self.layers.iter().zip(eff).enumerate() {
            h = layer.apply(&h, e.as_ref()).map_err(|err| wrap(i, layer, err))?;
        }
        if single {
            h.reshape(&self.output_shape().dims())
        } else {
            Ok(h)
        }
    }
}

pub(crate) fn wrap(index: usize, layer: &Layer, err: Error) -> Error {
    Error::Layer {
        index,
        kind: layer.spec.kind().into(),
        source: Box::new(err),
    }
}
