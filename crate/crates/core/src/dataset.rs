//! In-memory labelled datasets and their on-disk sources.

use std::f64::consts::PI;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Shape;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_PIXELS: usize = 32 * 32 * 3;

/// Examples stacked along the first axis plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::Dataset(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if !images.is_finite() {
            return Err(Error::NonFinite("dataset images".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one example.
    pub fn example_shape(&self) -> Shape {
        Shape::try_from(self.images.shape()[1..].to_vec()).expect("validated dataset shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` examples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// `labels.len() × num_classes` one-hot matrix.
    pub fn one_hot(labels: &[usize], num_classes: usize) -> Tensor {
        let mut y = Tensor::zeros(&[labels.len(), num_classes]);
        for (row, &l) in labels.iter().enumerate() {
            y.data_mut()[row * num_classes + l] = 1.0;
        }
        y
    }
}

fn default_label_bytes() -> usize {
    1
}

/// Where a train/test pair comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`, `t10k-…`,
    /// optionally gzipped.
    IdxMnist { dir: PathBuf },
    /// CIFAR binary batches. One label byte: `data_batch_{1..5}.bin` and
    /// `test_batch.bin` (CIFAR-10). Two label bytes: `train.bin` and
    /// `test.bin`, using the fine label (CIFAR-100).
    Cifar10Binary {
        dir: PathBuf,
        #[serde(default = "default_label_bytes")]
        label_bytes: usize,
    },
    /// Gaussian blobs in the plane, centres evenly spaced on a circle of
    /// radius 2. The test split has `n / 4` points from a derived seed.
    SyntheticBlobs {
        n: usize,
        classes: usize,
        noise: f64,
        seed: u64,
    },
    /// Label in the first column, features after it.
    Csv {
        train: PathBuf,
        test: PathBuf,
        shape: Shape,
        classes: usize,
    },
}

impl DatasetSource {
    /// Makes relative paths relative to `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSource::IdxMnist { dir } | DatasetSource::Cifar10Binary { dir, .. } => fix(dir),
            DatasetSource::Csv { train, test, .. } => {
                fix(train);
                fix(test);
            }
            DatasetSource::SyntheticBlobs { .. } => {}
        }
    }
}

/// Loads `(train, test)`.
pub fn load_dataset(src: &DatasetSource) -> Result<(Dataset, Dataset)> {
    match src {
        DatasetSource::IdxMnist { dir } => Ok((
            load_idx_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
            load_idx_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
        )),
        DatasetSource::Cifar10Binary { dir, label_bytes } => {
            let (train_files, test_file, classes) = match label_bytes {
                1 => (
                    (1..=5).map(|i| format!("data_batch_{i}.bin")).collect::<Vec<_>>(),
                    "test_batch.bin",
                    10,
                ),
                2 => (vec!["train.bin".to_string()], "test.bin", 100),
                n => return Err(Error::Dataset(format!("label_bytes must be 1 or 2, got {n}"))),
            };
            let mut bytes = Vec::new();
            for f in &train_files {
                bytes.extend(read_maybe_gz(&dir.join(f))?);
            }
            let train = parse_cifar(&bytes, *label_bytes, classes)?;
            let test = parse_cifar(&read_maybe_gz(&dir.join(test_file))?, *label_bytes, classes)?;
            Ok((train, test))
        }
        &DatasetSource::SyntheticBlobs {
            n,
            classes,
            noise,
            seed,
        } => Ok((
            synthetic_blobs(n, classes, noise, seed)?,
            synthetic_blobs((n / 4).max(1), classes, noise, seed ^ 0x9e37_79b9_7f4a_7c15)?,
        )),
        DatasetSource::Csv {
            train,
            test,
            shape,
            classes,
        } => Ok((load_csv(train, *shape, *classes)?, load_csv(test, *shape, *classes)?)),
    }
}

/// Reads a file, transparently inflating gzip. A missing `name` falls back
/// to `name.gz`.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let path = if path.exists() {
        path.to_path_buf()
    } else {
        let mut gz = path.as_os_str().to_owned();
        gz.push(".gz");
        let gz = PathBuf::from(gz);
        if !gz.exists() {
            return Err(Error::Dataset(format!("missing file {}", path.display())));
        }
        gz
    };
    let raw = fs::read(&path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX file, returning its dimensions and payload.
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::Dataset("IDX file shorter than its magic number".into()));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if magic != expected_magic {
        return Err(Error::Dataset(format!(
            "bad IDX magic {magic:#010x}, expected {expected_magic:#010x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Dataset("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let body = dims.iter().product::<usize>();
    if bytes.len() != header + body {
        return Err(Error::Dataset(format!(
            "IDX payload is {} bytes, header {dims:?} implies {body}",
            bytes.len() - header
        )));
    }
    Ok((dims, &bytes[header..]))
}

fn load_idx_pair(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(&dir.join(images))?;
    let lbl_bytes = read_maybe_gz(&dir.join(labels))?;
    let (idims, pixels) = parse_idx(&img_bytes, IDX_IMAGES_MAGIC)?;
    let (ldims, lbls) = parse_idx(&lbl_bytes, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::Dataset(format!("{} images but {} labels", idims[0], ldims[0])));
    }
    let images = Tensor::new(
        vec![idims[0], idims[1], idims[2], 1],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = lbls.iter().map(|&l| l as usize).collect();
    Dataset::new(images, labels, 10)
}

/// Parses concatenated CIFAR records (label bytes then 3×1024 planar pixels).
pub fn parse_cifar(bytes: &[u8], label_bytes: usize, classes: usize) -> Result<Dataset> {
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(Error::Dataset(format!(
            "CIFAR data of {} bytes is not a whole number of {record}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(record) {
        labels.push(rec[label_bytes - 1] as usize);
        let px = &rec[label_bytes..];
        // planar RGB to interleaved HWC
        for i in 0..1024 {
            for c in 0..3 {
                data.push(px[c * 1024 + i] as f64 / 255.0);
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 32, 32, 3], data)?, labels, classes)
}

/// `n` points in `classes` Gaussian blobs with standard deviation `noise`.
pub fn synthetic_blobs(n: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || classes < 2 || !(noise >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "synthetic_blobs needs n > 0, classes ≥ 2, noise ≥ 0 (got {n}, {classes}, {noise})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let angle = 2.0 * PI * class as f64 / classes as f64;
        data.push(2.0 * angle.cos() + normal.sample(&mut rng));
        data.push(2.0 * angle.sin() + normal.sample(&mut rng));
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, classes)
}

fn load_csv(path: &Path, shape: Shape, classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let width = shape.numel();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != width + 1 {
            return Err(Error::Dataset(format!(
                "{} row {row}: {} fields, expected {}",
                path.display(),
                record.len(),
                width + 1
            )));
        }
        let parse_err = |e: &dyn std::fmt::Display| Error::Dataset(format!("{} row {row}: {e}", path.display()));
        labels.push(record[0].trim().parse::<usize>().map_err(|e| parse_err(&e))?);
        for field in record.iter().skip(1) {
            data.push(field.trim().parse::<f64>().map_err(|e| parse_err(&e))?);
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(shape.batched(n), data)?, labels, classes)
}
