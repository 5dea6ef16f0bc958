//! `aolkit` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 validation failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aolkit::certification::{certified_robust_accuracy, DEFAULT_EPS};
use aolkit::dataset::{load_dataset, DatasetSource};
use aolkit::diagnostics::{
    audit_model_bound, conv_layer_indices, gradcheck, gram_analysis, write_gram_crops, GradCheckOptions, PowerIteration,
};
use aolkit::io::{Checkpoint, RunConfig};
use aolkit::training::{train, EpochMetrics, TrainConfig};
use aolkit::{build_model, Error, Model, Tensor};
use clap::{Args, Parser, Subcommand};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "aolkit", version, about = "Train and certify almost-orthogonal Lipschitz networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file; writes a checkpoint and metrics CSV.
    Train(TrainArgs),
    /// Certified robust accuracy of a checkpoint over an ε grid.
    Certify(CertifyArgs),
    /// JᵀJ statistics and crops for one linear layer.
    Diagnose(DiagnoseArgs),
    /// Per-layer spectral norm audit; exits 2 if any layer exceeds 1.
    Bound(BoundArgs),
    /// Compare backprop gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Dataset override: `idx_mnist:DIR`, `cifar10_binary:DIR`,
    /// `cifar100_binary:DIR` or `synthetic_blobs[:N,CLASSES,NOISE,SEED]`.
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Loss offset u.
    #[arg(long)]
    offset_u: Option<f64>,
    /// Loss temperature t.
    #[arg(long)]
    temperature_t: Option<f64>,
    /// Also certify the test split after training, at these radii.
    #[arg(long)]
    eps: Vec<f64>,
}

#[derive(Args)]
struct CertifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Certification radius (repeatable); defaults to the config's grid.
    #[arg(long)]
    eps: Vec<f64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Layer index; defaults to the middle convolution.
    #[arg(long)]
    layer: Option<usize>,
    /// Side length of the exported Gram crops.
    #[arg(long, default_value_t = 64)]
    crop: usize,
}

#[derive(Args)]
struct BoundArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to check; otherwise a fresh model from --config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    offset_u: Option<f64>,
    #[arg(long)]
    temperature_t: Option<f64>,
    /// Uniform parameter jitter before checking (default 0.1 for a fresh
    /// model, 0 for a checkpoint).
    #[arg(long)]
    perturb: Option<f64>,
}

/// Error with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } | Error::NonFinite(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn validation(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = std::env::var("AOLKIT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // ignore failure: the pool may already exist
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Bound(a) => cmd_bound(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn parse_dataset(arg: &str) -> Result<DatasetSource, Failure> {
    let (kind, rest) = arg.split_once(':').map_or((arg, None), |(k, r)| (k, Some(r)));
    let need_path = || rest.map(PathBuf::from).ok_or_else(|| usage(format!("--dataset {kind} needs :PATH")));
    Ok(match kind {
        "idx_mnist" => DatasetSource::IdxMnist { dir: need_path()? },
        "cifar10_binary" => DatasetSource::Cifar10Binary {
            dir: need_path()?,
            label_bytes: 1,
        },
        "cifar100_binary" => DatasetSource::Cifar10Binary {
            dir: need_path()?,
            label_bytes: 2,
        },
        "synthetic_blobs" => {
            let fields: Vec<&str> = rest.map(|r| r.split(',').collect()).unwrap_or_default();
            let get = |i: usize, default: &str| fields.get(i).copied().unwrap_or(default).to_string();
            let bad = |_| usage(format!("cannot parse --dataset {arg}"));
            DatasetSource::SyntheticBlobs {
                n: get(0, "400").parse().map_err(bad)?,
                classes: get(1, "2").parse().map_err(bad)?,
                noise: get(2, "0.5").parse().map_err(|_| usage(format!("cannot parse --dataset {arg}")))?,
                seed: get(3, "0").parse().map_err(bad)?,
            }
        }
        other => return Err(usage(format!("unknown dataset kind `{other}`"))),
    })
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let path = common.config.as_deref().ok_or_else(|| usage("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(d) = &common.dataset {
        cfg.dataset = parse_dataset(d)?;
    }
    Ok(cfg)
}

/// Config from `--config` if given, else the one stored in the checkpoint.
fn config_for_checkpoint(common: &Common, ckpt: &Checkpoint) -> Result<RunConfig, Failure> {
    let mut cfg = match (&common.config, &ckpt.header.config) {
        (Some(_), _) => load_config(common)?,
        (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| usage(format!("stored config: {e}")))?,
        (None, None) => return Err(usage("checkpoint has no stored config; pass --config")),
    };
    if let Some(d) = &common.dataset {
        cfg.dataset = parse_dataset(d)?;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let mut cfg = load_config(&a.common)?;
    let t: &mut TrainConfig = &mut cfg.train;
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(u) = a.offset_u {
        t.loss_offset = u;
    }
    if let Some(temp) = a.temperature_t {
        t.loss_temperature = temp;
    }
    cfg.validate()?;
    let out = &a.common.out_dir;
    ensure_dir(out)?;
    let (train_set, test_set) = load_dataset(&cfg.dataset)?;
    let model = build_model(&cfg.model, cfg.train.seed)?;
    eprintln!(
        "training {} parameters on {} examples for {} epochs",
        model.num_params(),
        train_set.len(),
        cfg.train.epochs
    );
    let mut progress = |m: &EpochMetrics, _: &Model| {
        eprintln!(
            "epoch {:>4}  lr {:.2e}  loss {:.4}  train {:.4}  val {}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.train_acc,
            m.val_acc.map_or("-".into(), |v| format!("{v:.4}"))
        );
        Ok(())
    };
    let outcome = train(model, &train_set, Some(&test_set), &cfg.train, &mut progress)?;
    outcome.log.save_csv(&out.join("metrics.csv"))?;
    let mut ckpt = Checkpoint::new(outcome.model, cfg.train.seed, cfg.train.epochs);
    ckpt.header.metrics = outcome.log.last().cloned();
    ckpt.header.config = Some(serde_json::to_value(&cfg).map_err(Error::from)?);
    ckpt.save(&out.join("model.ckpt"))?;
    cfg.save(&out.join("config.json"))?;
    if !a.eps.is_empty() {
        let report = certified_robust_accuracy(&ckpt.model, &test_set, &a.eps, cfg.eval.lipschitz_bound)?;
        report.write_json(&out.join("cert.json"))?;
    }
    eprintln!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn cmd_certify(a: CertifyArgs) -> Outcome {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = config_for_checkpoint(&a.common, &ckpt)?;
    let eps = if !a.eps.is_empty() {
        a.eps
    } else if !cfg.eval.eps.is_empty() {
        cfg.eval.eps.clone()
    } else {
        DEFAULT_EPS.to_vec()
    };
    if eps.iter().any(|&e| !(e >= 0.0)) {
        return Err(usage("--eps must be ≥ 0"));
    }
    let (_, test_set) = load_dataset(&cfg.dataset)?;
    let report = certified_robust_accuracy(&ckpt.model, &test_set, &eps, cfg.eval.lipschitz_bound)?;
    ensure_dir(&a.common.out_dir)?;
    report.write_json(&a.common.out_dir.join("cert.json"))?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    std::fs::write(a.common.out_dir.join("cert.csv"), &csv)?;
    println!("clean_accuracy {:.4}", report.clean_accuracy);
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn cmd_diagnose(a: DiagnoseArgs) -> Outcome {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = &ckpt.model;
    let index = match a.layer {
        Some(i) => i,
        None => {
            let convs = conv_layer_indices(model);
            *convs
                .get(convs.len() / 2)
                .ok_or_else(|| usage("model has no convolution; pass --layer"))?
        }
    };
    let layer = model
        .layers()
        .get(index)
        .ok_or_else(|| usage(format!("layer {index} out of range")))?;
    let stats = gram_analysis(layer)?;
    ensure_dir(&a.common.out_dir)?;
    let c = a.crop as isize;
    let crops = write_gram_crops(&stats.gram, &a.common.out_dir, a.crop, &[(0, c), (c, 0)])?;
    let json = serde_json::to_string_pretty(&stats).map_err(Error::from)?;
    std::fs::write(a.common.out_dir.join("gram_stats.json"), &json)?;
    println!("layer {index} ({})", layer.spec().kind());
    println!("{json}");
    for p in crops {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_bound(a: BoundArgs) -> Outcome {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let audit = audit_model_bound(&ckpt.model, PowerIteration::default())?;
    let mut csv = Vec::new();
    audit.write_csv(&mut csv)?;
    ensure_dir(&a.common.out_dir)?;
    std::fs::write(a.common.out_dir.join("bound.csv"), &csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    println!("product {}", audit.product);
    if audit.passed() {
        Ok(())
    } else {
        let flagged: Vec<String> = audit.layers.iter().filter(|l| l.flagged).map(|l| l.index.to_string()).collect();
        Err(validation(format!("layers above the bound: {}", flagged.join(", "))))
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Outcome {
    let (mut model, mut train_cfg) = match &a.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let train_cfg = ckpt
                .header
                .config
                .as_ref()
                .and_then(|v| serde_json::from_value::<RunConfig>(v.clone()).ok())
                .map(|c| c.train)
                .unwrap_or_default();
            (ckpt.model, train_cfg)
        }
        None => {
            let cfg = load_config(&a.common)?;
            (build_model(&cfg.model, a.seed)?, cfg.train)
        }
    };
    if let Some(u) = a.offset_u {
        train_cfg.loss_offset = u;
    }
    if let Some(t) = a.temperature_t {
        train_cfg.loss_temperature = t;
    }
    // deterministic pseudo-random stream in [0, 1)
    let batch = 4;
    let mut state = a.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    // identity and orthogonal inits put PᵀP's zero entries on the kink of |·|
    let perturb = a.perturb.unwrap_or(if a.checkpoint.is_some() { 0.0 } else { 0.1 });
    if perturb > 0.0 {
        for p in model.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += perturb * (2.0 * next() - 1.0));
        }
    }
    let x = Tensor::from_fn(&model.input_shape().batched(batch), |_| next());
    let classes = model.num_outputs();
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let opts = GradCheckOptions {
        seed: a.seed,
        loss_offset: train_cfg.loss_offset,
        loss_temperature: train_cfg.loss_temperature,
        ..GradCheckOptions::default()
    };
    let report = gradcheck(&model, &x, &labels, opts)?;
    let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
    println!(
        "{} max_rel_error {:.3e} over {} coordinates",
        if pass { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.entries.len()
    );
    if pass {
        Ok(())
    } else {
        Err(validation("gradient check failed"))
    }
}
