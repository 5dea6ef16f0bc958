//! Binary checkpoint layout:
//!
//! ```text
//! magic "AOLCKPT\0" | u64 header length | JSON header
//! per parameter tensor: u32 rank | u64 dims… | little-endian values
//! ```
//!
//! Tensors follow [`Model::params`] order (weight then bias of each
//! parameter layer). Values are f64 unless the header says `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Model, ModelSpec};
use crate::tensor::Tensor;
use crate::training::EpochMetrics;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AOLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub spec: ModelSpec,
    pub seed: u64,
    pub epoch: usize,
    pub metrics: Option<EpochMetrics>,
    /// Free-form run configuration, kept for provenance.
    pub config: Option<serde_json::Value>,
    pub dtype: Dtype,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64, epoch: usize) -> Self {
        Self {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                spec: model.spec().clone(),
                seed,
                epoch,
                metrics: None,
                config: None,
                dtype: Dtype::F64,
            },
            model,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.model.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.model.params() {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                match self.header.dtype {
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let len = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let mut model = Model::new(header.spec.clone())?;
        for (k, p) in model.params_mut().enumerate() {
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {k} has shape {shape:?}, the model spec expects {:?}",
                    p.shape()
                )));
            }
            let data: Vec<f64> = match header.dtype {
                Dtype::F64 => r
                    .take(8 * p.len())?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => r
                    .take(4 * p.len())?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            *p = Tensor::new(shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{build_model, LayerSpec, Shape};
    use crate::tensor::Padding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let spec = ModelSpec {
            input_shape: Shape::Image {
                height: 4,
                width: 4,
                channels: 2,
            },
            layers: vec![
                LayerSpec::AolConv {
                    kernel_size: 3,
                    stride: 1,
                    out_channels: 4,
                    padding: Padding::SameZero,
                },
                LayerSpec::MaxMin,
                LayerSpec::Flatten,
                LayerSpec::AolFc { out_dim: 3 },
            ],
        };
        let mut m = build_model(&spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let ckpt = Checkpoint::new(m.clone(), 1, 3);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let x = Tensor::from_fn(&[2, 4, 4, 2], |i| (i as f64 * 0.37).sin());
        let (a, b) = (m.forward(&x).unwrap(), back.model.forward(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn f32_storage_is_close() {
        let mut ckpt = Checkpoint::new(model(), 0, 0);
        ckpt.header.dtype = Dtype::F32;
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        for (a, b) in ckpt.model.params().zip(back.model.params()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::new(model(), 0, 0).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
