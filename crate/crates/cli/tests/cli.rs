use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aolkit::io::Checkpoint;
use aolkit::layers::LinearParams;
use aolkit::{LayerSpec, Model, ModelSpec, Shape, Tensor};

fn aolkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aolkit"))
        .args(args)
        .env("AOLKIT_THREADS", "1")
        .output()
        .expect("spawn aolkit")
}

fn blobs_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs.json")
}

fn train_into(dir: &Path, seed: &str) -> Output {
    let config = blobs_config();
    aolkit(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
        "--epochs",
        "5",
        "--seed",
        seed,
    ])
}

#[test]
fn train_writes_artifacts_deterministically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = train_into(dir.path(), "3");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["model.ckpt", "metrics.csv", "config.json"] {
        let (x, y) = (
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
        );
        assert_eq!(x, y, "{name} differs between identical runs");
    }
    let metrics = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,lr,train_loss,train_acc,val_acc,cert_acc@"));
    assert_eq!(metrics.lines().count(), 6);
}

#[test]
fn certify_reports_every_radius() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_into(dir.path(), "0").status.success());
    let ckpt = dir.path().join("model.ckpt");
    let out = aolkit(&[
        "certify",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--eps",
        "0.1",
        "--eps",
        "0.5",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cert.json")).unwrap()).unwrap();
    assert_eq!(json["lipschitz_bound"], 1.0);
    let results = json["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    for r in results {
        for key in ["eps", "certified", "total", "cert_acc"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("cert.csv")).unwrap();
    assert!(csv.starts_with("eps,certified,total,cert_acc"));
}

#[test]
fn bound_passes_for_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_into(dir.path(), "1").status.success());
    let ckpt = dir.path().join("model.ckpt");
    let out = aolkit(&["bound", "--checkpoint", ckpt.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("product"));
}

#[test]
fn bound_flags_expansive_layer() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec {
        input_shape: Shape::Flat(4),
        layers: vec![LayerSpec::Dense { out_dim: 4 }],
    };
    let mut model = Model::new(spec).unwrap();
    model.layers_mut()[0]
        .set_params(LinearParams {
            weight: Tensor::eye(4).scale(1.5),
            bias: Tensor::zeros(&[4]),
        })
        .unwrap();
    let ckpt = dir.path().join("raw.ckpt");
    Checkpoint::new(model, 0, 0).save(&ckpt).unwrap();
    let out = aolkit(&["bound", "--checkpoint", ckpt.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_fresh_model() {
    let config = blobs_config();
    let out = aolkit(&["gradcheck", "--config", config.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("PASS"));
}

#[test]
fn diagnose_writes_gram_statistics() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_into(dir.path(), "2").status.success());
    let ckpt = dir.path().join("model.ckpt");
    let out = aolkit(&[
        "diagnose",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--layer",
        "1",
        "--crop",
        "4",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gram_stats.json")).unwrap()).unwrap();
    assert!(stats["orthogonality_ratio"].as_f64().unwrap() >= 0.0);
    assert!(dir.path().join("gram_center.csv").exists());
}

#[test]
fn usage_and_input_errors_exit_one() {
    assert_eq!(aolkit(&["--help"]).status.code(), Some(0));
    assert_eq!(aolkit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(aolkit(&["train", "--config", "/nonexistent/config.json"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(aolkit(&["bound", "--checkpoint", junk.to_str().unwrap()]).status.code(), Some(1));
}
