use aolkit::diagnostics::{materialize_jacobian, matrix_spectral_norm, PowerIteration};
use aolkit::layers::{Layer, LayerSpec, LinearParams, Shape};
use aolkit::rescale::{rescale_kernel, rescale_matrix};
use aolkit::tensor::{matmul, Padding, Tensor};
use proptest::prelude::*;

fn conv_layer(k: usize, stride: usize, padding: Padding, cin: usize, cout: usize, n: usize, p: Tensor) -> Layer {
    let spec = LayerSpec::AolConv {
        kernel_size: k,
        stride,
        out_channels: cout,
        padding,
    };
    let shape = Shape::Image {
        height: n,
        width: n,
        channels: cin,
    };
    let mut layer = Layer::new(spec, shape).unwrap();
    layer
        .set_params(LinearParams {
            weight: p,
            bias: Tensor::zeros(&[cout]),
        })
        .unwrap();
    layer
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rescaled_matrix_is_contractive(
        rows in 1usize..12,
        cols in 1usize..12,
        seed in any::<u64>(),
        scale in -3.0f64..3.0,
    ) {
        let mut state = seed | 1;
        let p = Tensor::from_fn(&[rows, cols], |_| {
            state ^= state << 13; state ^= state >> 7; state ^= state << 17;
            ((state % 2001) as f64 / 1000.0 - 1.0) * 10f64.powf(scale)
        });
        let w = rescale_matrix(&p).unwrap().weight;
        let sigma = matrix_spectral_norm(&w, PowerIteration { iters: 500, ..Default::default() }).unwrap();
        prop_assert!(sigma <= 1.0 + 1e-9, "sigma {sigma}");
    }

    #[test]
    fn rescale_is_scale_invariant(alpha in 0.01f64..100.0, seed in any::<u64>()) {
        let mut state = seed | 1;
        let p = Tensor::from_fn(&[6, 4], |_| {
            state ^= state << 13; state ^= state >> 7; state ^= state << 17;
            (state % 1000) as f64 / 500.0 - 1.0
        });
        let a = rescale_matrix(&p).unwrap().weight;
        let b = rescale_matrix(&p.scale(alpha)).unwrap().weight;
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn rescaled_conv_is_contractive(
        k in 1usize..4,
        stride in 1usize..3,
        cin in 1usize..4,
        cout in 1usize..4,
        maximal in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut state = seed | 1;
        let p = Tensor::from_fn(&[k, k, cin, cout], |_| {
            state ^= state << 13; state ^= state >> 7; state ^= state << 17;
            (state % 1000) as f64 / 500.0 - 1.0
        });
        let padding = if maximal { Padding::Maximal } else { Padding::SameZero };
        let layer = conv_layer(k, stride, padding, cin, cout, 6, p);
        let j = materialize_jacobian(&layer).unwrap();
        let sigma = matrix_spectral_norm(&j, PowerIteration { iters: 500, ..Default::default() }).unwrap();
        prop_assert!(sigma <= 1.0 + 1e-9, "sigma {sigma}");
    }
}

#[test]
fn orthogonal_columns_are_a_fixed_point() {
    // columns of a rotation are orthonormal, so D = 1 and W = P
    let (c, s) = (0.6f64, 0.8f64);
    let p = Tensor::from_rows(&[&[c, -s], &[s, c], &[0.0, 0.0]]);
    let r = rescale_matrix(&p).unwrap();
    assert!(r.scale.iter().all(|d| (d - 1.0).abs() < 1e-15));
    let wtw = matmul(&r.weight.transpose().unwrap(), &r.weight).unwrap();
    assert!(wtw.max_abs_diff(&Tensor::eye(2)) < 1e-15);
}

/// The all-ones 2×2 kernel rescales to 1/4; with maximal padding on an n×n
/// input its Jacobian is a Kronecker product of two `(n+1)×n` bidiagonal
/// averaging matrices, so `σ_max = cos²(π / (2(n+1)))`.
#[test]
fn ones_kernel_spectral_norm_closed_form() {
    let opts = PowerIteration {
        iters: 20_000,
        tol: 1e-15,
        seed: 1,
    };
    let mut previous = 0.0;
    for n in [4, 8, 16] {
        let layer = conv_layer(2, 1, Padding::Maximal, 1, 1, n, Tensor::full(&[2, 2, 1, 1], 1.0));
        let sigma = matrix_spectral_norm(&materialize_jacobian(&layer).unwrap(), opts).unwrap();
        let expected = (std::f64::consts::PI / (2.0 * (n as f64 + 1.0))).cos().powi(2);
        assert!((sigma - expected).abs() < 1e-8, "n={n}: {sigma} vs {expected}");
        assert!(sigma > previous && sigma < 1.0);
        previous = sigma;
    }
}

#[test]
fn one_by_one_conv_matches_dense_rescale() {
    let p = Tensor::from_fn(&[1, 1, 3, 5], |i| ((i * 37 % 11) as f64 - 5.0) / 3.0);
    let conv = rescale_kernel(&p).unwrap();
    let dense = rescale_matrix(&p.clone().reshape(&[3, 5]).unwrap().transpose().unwrap()).unwrap();
    for (a, b) in conv.scale.iter().zip(&dense.scale) {
        assert!((a - b).abs() < 1e-12);
    }
}
