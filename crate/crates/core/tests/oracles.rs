use aolkit::certification::{attack_check, certified, certified_robust_accuracy, margin, DEFAULT_EPS};
use aolkit::dataset::Dataset;
use aolkit::diagnostics::{
    gram_analysis, gradcheck, layer_spectral_norm, materialize_jacobian, matrix_spectral_norm, GradCheckOptions,
    PowerIteration,
};
use aolkit::layers::{init_orthogonal, Layer, LinearParams};
use aolkit::{build_model, LayerSpec, ModelSpec, Padding, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn img(h: usize, w: usize, c: usize) -> Shape {
    Shape::Image {
        height: h,
        width: w,
        channels: c,
    }
}

fn randomized(spec: LayerSpec, shape: Shape, seed: u64) -> Layer {
    let mut layer = Layer::new(spec, shape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(p) = layer.params.as_mut() {
        p.weight = Tensor::from_fn(p.weight.shape(), |_| rng.random_range(-1.0..1.0));
    }
    layer
}

#[test]
fn operator_and_materialized_power_iteration_agree() {
    let spec = LayerSpec::AolConv {
        kernel_size: 3,
        stride: 1,
        out_channels: 3,
        padding: Padding::SameZero,
    };
    let layer = randomized(spec, img(6, 6, 2), 1);
    let opts = PowerIteration {
        iters: 20_000,
        tol: 1e-15,
        seed: 2,
    };
    let op = layer_spectral_norm(&layer, opts).unwrap();
    let dense = matrix_spectral_norm(&materialize_jacobian(&layer).unwrap(), opts).unwrap();
    assert!((op - dense).abs() < 1e-8, "{op} vs {dense}");
}

#[test]
fn orthogonal_columns_give_identity_gram() {
    let layer = Layer::new(LayerSpec::AolFc { out_dim: 30 }, Shape::Flat(12)).unwrap();
    let mut layer = layer;
    let params = init_orthogonal(&layer, 4).unwrap();
    layer.set_params(params).unwrap();
    let stats = gram_analysis(&layer).unwrap();
    assert!(stats.gram.max_abs_diff(&Tensor::eye(12)) < 1e-9);
}

#[test]
fn pointwise_conv_gram_matches_dense_layer() {
    let spec = LayerSpec::AolConv {
        kernel_size: 1,
        stride: 1,
        out_channels: 4,
        padding: Padding::SameZero,
    };
    let conv = randomized(spec, img(3, 3, 5), 7);
    let p = conv.params.as_ref().unwrap().weight.clone();
    let mut dense = Layer::new(LayerSpec::AolFc { out_dim: 4 }, Shape::Flat(5)).unwrap();
    dense
        .set_params(LinearParams {
            weight: p.reshape(&[5, 4]).unwrap().transpose().unwrap(),
            bias: Tensor::zeros(&[4]),
        })
        .unwrap();
    let gc = gram_analysis(&conv).unwrap().gram;
    let gd = gram_analysis(&dense).unwrap().gram;
    // the conv gram is block diagonal with one dense gram per pixel
    for px in 0..9 {
        for a in 0..5 {
            for b in 0..5 {
                let v = gc.get(&[px * 5 + a, px * 5 + b]);
                assert!((v - gd.get(&[a, b])).abs() < 1e-12);
            }
        }
    }
    assert!((gc.sum() - 9.0 * gd.sum()).abs() < 1e-10);
}

#[test]
fn raw_conv_is_less_orthogonal_than_rescaled_init() {
    let spec = LayerSpec::Conv {
        kernel_size: 3,
        stride: 1,
        out_channels: 4,
        padding: Padding::SameZero,
    };
    let raw = randomized(spec, img(5, 5, 4), 3);
    let mut init = raw.clone();
    let params = init_orthogonal(&init, 3).unwrap();
    init.set_params(params).unwrap();
    let (r, o) = (gram_analysis(&raw).unwrap(), gram_analysis(&init).unwrap());
    assert!(r.orthogonality_ratio > 100.0 * o.orthogonality_ratio.max(1e-12));
}

#[test]
fn gradients_match_finite_differences_on_mixed_model() {
    let conv = |c| LayerSpec::AolConv {
        kernel_size: 3,
        stride: 1,
        out_channels: c,
        padding: Padding::SameZero,
    };
    let spec = ModelSpec {
        input_shape: img(4, 4, 2),
        layers: vec![
            LayerSpec::ConcatPool { patch: 2 },
            conv(8),
            LayerSpec::MaxMin,
            conv(6),
            LayerSpec::MaxMin,
            LayerSpec::Flatten,
            LayerSpec::AolFc { out_dim: 8 },
            LayerSpec::MaxMin,
            LayerSpec::AolFc { out_dim: 3 },
        ],
    };
    let mut model = build_model(&spec, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for p in model.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let x = Tensor::from_fn(&[4, 4, 4, 2], |_| rng.random_range(0.0..1.0));
    let report = gradcheck(&model, &x, &[0, 1, 2, 1], GradCheckOptions::default()).unwrap();
    assert_eq!(report.entries.len(), 50);
    assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
}

fn trained_like_model() -> aolkit::Model {
    let spec = ModelSpec {
        input_shape: Shape::Flat(6),
        layers: vec![
            LayerSpec::AolFc { out_dim: 8 },
            LayerSpec::MaxMin,
            LayerSpec::AolFc { out_dim: 4 },
        ],
    };
    let mut model = build_model(&spec, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for p in model.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    model
}

#[test]
fn certified_accuracy_is_monotone_and_below_clean() {
    let model = trained_like_model();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let images = Tensor::from_fn(&[300, 6], |_| rng.random_range(-2.0..2.0));
    let logits = model.forward(&images).unwrap();
    // label with the model's own prediction half the time
    let labels: Vec<usize> = logits
        .data()
        .chunks(4)
        .enumerate()
        .map(|(i, row)| {
            if i % 2 == 0 {
                (0..4).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
            } else {
                i % 4
            }
        })
        .collect();
    let ds = Dataset::new(images, labels, 4).unwrap();
    let mut eps = vec![0.0, 0.01, 0.05];
    eps.extend(DEFAULT_EPS);
    let report = certified_robust_accuracy(&model, &ds, &eps, 1.0).unwrap();
    assert_eq!(report.results[0].cert_acc, report.clean_accuracy);
    for w in report.results.windows(2) {
        assert!(w[0].cert_acc >= w[1].cert_acc);
    }
    assert!(report.clean_accuracy > 0.4);
}

#[test]
fn margin_is_root_two_lipschitz() {
    let model = trained_like_model();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..500 {
        let x = Tensor::from_fn(&[6], |_| rng.random_range(-1.0..1.0));
        let y = Tensor::from_fn(&[6], |_| rng.random_range(-1.0..1.0));
        let label = rng.random_range(0..4);
        let mx = margin(model.forward(&x).unwrap().data(), label).unwrap();
        let my = margin(model.forward(&y).unwrap().data(), label).unwrap();
        assert!((mx - my).abs() <= std::f64::consts::SQRT_2 * x.sub(&y).unwrap().norm() + 1e-12);
    }
}

#[test]
fn certified_points_survive_attacks() {
    let model = trained_like_model();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut checked = 0;
    while checked < 20 {
        let x = Tensor::from_fn(&[6], |_| rng.random_range(-3.0..3.0));
        let logits = model.forward(&x).unwrap();
        let y = (0..4).max_by(|&a, &b| logits.data()[a].total_cmp(&logits.data()[b])).unwrap();
        let m = margin(logits.data(), y).unwrap();
        let eps = 0.95 * m / std::f64::consts::SQRT_2;
        if !certified(m, eps, 1.0) || eps < 1e-3 {
            continue;
        }
        assert!(attack_check(&model, &x, y, eps, 300, checked).unwrap());
        checked += 1;
    }
}
