//! Almost-orthogonal Lipschitz (AOL) networks.
//!
//! Every linear layer is reparametrized as `W = P·D`, where the diagonal `D`
//! is computed in closed form from the raw parameters so that the spectral
//! norm of `W` never exceeds one. Convolutions use a per-input-channel factor
//! derived from the kernel's self-correlation. Stacking such layers with
//! norm-preserving activations gives a network that is 1-Lipschitz by
//! construction, which in turn lets the logit margin certify robustness to
//! L2 perturbations.
//!
//! Module map:
//! - [`tensor`]: dense f64 tensors, GEMM, 2-D cross-correlation
//! - [`rescale`]: the AOL rescaling for matrices and convolution kernels
//! - [`layers`]: layer zoo, model builder, initialization, architecture presets
//! - [`training`]: margin loss, backpropagation, SGD with Nesterov momentum
//! - [`certification`]: margins, certified robust accuracy, attack probes
//! - [`diagnostics`]: power iteration, Jacobian materialization, `JᵀJ` statistics
//! - [`io`]: datasets, configuration files, checkpoints

pub mod certification;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod layers;
pub mod rescale;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use layers::{build_model, LayerSpec, Model, ModelSpec, Shape};
pub use tensor::{ConvGeometry, Padding, Tensor};
