//! Ready-made architectures.

use super::{LayerSpec, ModelSpec, Shape};
use crate::tensor::Padding;

fn aol_conv(kernel_size: usize, stride: usize, out_channels: usize) -> LayerSpec {
    LayerSpec::AolConv {
        kernel_size,
        stride,
        out_channels,
        padding: Padding::SameZero,
    }
}

/// Patchwise network: concatenation pooling, a 1×1 conv, `conv_blocks`
/// 3×3 convs, a final 1×1 conv, channel truncation to `width`, then
/// `fc_blocks + 1` square dense layers and truncation to `classes`.
#[allow(clippy::too_many_arguments)]
pub fn patchwise(
    input_shape: Shape,
    patch: usize,
    channels: usize,
    conv_blocks: usize,
    width: usize,
    fc_blocks: usize,
    classes: usize,
) -> ModelSpec {
    let mut layers = vec![LayerSpec::ConcatPool { patch }, aol_conv(1, 1, channels), LayerSpec::MaxMin];
    for _ in 0..conv_blocks {
        layers.extend([aol_conv(3, 1, channels), LayerSpec::MaxMin]);
    }
    layers.push(aol_conv(1, 1, channels));
    layers.push(LayerSpec::FirstChannels { n: width });
    layers.push(LayerSpec::Flatten);
    let fc = match input_shape {
        Shape::Image { height, width: w, .. } => (height / patch) * (w / patch) * width,
        Shape::Flat(_) => width,
    };
    for _ in 0..fc_blocks {
        layers.extend([LayerSpec::AolFc { out_dim: fc }, LayerSpec::MaxMin]);
    }
    layers.push(LayerSpec::AolFc { out_dim: fc });
    layers.push(LayerSpec::FirstChannels { n: classes });
    ModelSpec { input_shape, layers }
}

/// The full-size patchwise architecture for 32×32×3 inputs
/// (`width` = 16, 32, 48 for small, medium, large).
pub fn aol_patchwise(width: usize, classes: usize) -> ModelSpec {
    let input = Shape::Image {
        height: 32,
        width: 32,
        channels: 3,
    };
    patchwise(input, 4, 192, 12, width, 13, classes)
}

/// Plain fully-connected network: flatten, `blocks` MaxMin dense layers of
/// size `hidden`, one linear dense layer, truncation to `classes`.
pub fn aol_fc(input_shape: Shape, hidden: usize, blocks: usize, classes: usize) -> ModelSpec {
    let mut layers = vec![LayerSpec::Flatten];
    for _ in 0..blocks {
        layers.extend([LayerSpec::AolFc { out_dim: hidden }, LayerSpec::MaxMin]);
    }
    layers.push(LayerSpec::AolFc { out_dim: hidden });
    layers.push(LayerSpec::FirstChannels { n: classes });
    ModelSpec { input_shape, layers }
}

/// Channel-doubling CNN on 32×32×3 with AOL convolutions. Use
/// [`ModelSpec::unconstrained`] for the unconstrained baseline.
pub fn aol_std(classes: usize) -> ModelSpec {
    let mut layers = Vec::new();
    for c in [32, 64, 128, 256, 512] {
        for _ in 0..4 {
            layers.extend([aol_conv(3, 1, c), LayerSpec::MaxMin]);
        }
        layers.push(aol_conv(2, 2, 2 * c));
    }
    layers.push(aol_conv(1, 1, 1024));
    layers.push(LayerSpec::FirstChannels { n: classes });
    layers.push(LayerSpec::Flatten);
    ModelSpec {
        input_shape: Shape::Image {
            height: 32,
            width: 32,
            channels: 3,
        },
        layers,
    }
}

/// Channel-quadrupling CNN on 32×32×3, capped at 1024 channels.
pub fn aol_alt(classes: usize) -> ModelSpec {
    let mut layers = Vec::new();
    let stage = |layers: &mut Vec<LayerSpec>, c: usize, inner_k: usize| {
        layers.extend([aol_conv(2, 2, c), LayerSpec::MaxMin]);
        for _ in 0..4 {
            layers.extend([aol_conv(inner_k, 1, c), LayerSpec::MaxMin]);
        }
    };
    stage(&mut layers, 16, 3);
    stage(&mut layers, 64, 3);
    stage(&mut layers, 256, 3);
    stage(&mut layers, 1024, 1);
    layers.push(aol_conv(1, 1, 1024));
    layers.push(LayerSpec::FirstChannels { n: 256 });
    stage(&mut layers, 1024, 1);
    layers.push(aol_conv(1, 1, 1024));
    layers.push(LayerSpec::FirstChannels { n: classes });
    layers.push(LayerSpec::Flatten);
    ModelSpec {
        input_shape: Shape::Image {
            height: 32,
            width: 32,
            channels: 3,
        },
        layers,
    }
}
