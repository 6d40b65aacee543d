//! "NSPP1" checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "NSPP1\n"
//! u32 header_len, TOML header (model config, optional stft/loss/training)
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 rank, rank × u32 dims, f32 values
//! ```
//!
//! Model tensors use the names from [`ModelParams::tensors`]; optimizer
//! moments are stored as `adam.m.<name>` and `adam.v.<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Model, ModelConfig, ModelParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::spectral::StftConfig;

pub const MAGIC: &[u8; 6] = b"NSPP1\n";

/// Where a training run stands. Together with the seed this fixes every
/// later crop and update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: u64,
    /// Batches already taken within `epoch`.
    pub batch_in_epoch: u64,
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stft: Option<StftConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<Progress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub adamw: AdamWConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    /// A weights-only checkpoint.
    pub fn from_model(model: &Model<f32>, stft: Option<StftConfig>) -> Self {
        Self {
            header: Header {
                model: model.config().clone(),
                stft,
                loss: None,
                progress: None,
                optimizer: None,
            },
            params: model.params().clone(),
            optimizer: None,
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::new(self.header.model.clone(), self.params.clone())
    }

    pub fn into_model(self) -> Result<Model<f32>> {
        Model::new(self.header.model, self.params)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        header.optimizer = self.optimizer.as_ref().map(|o| OptimizerHeader {
            adamw: o.config,
            step: o.step,
        });
        let text = toml::to_string(&header).expect("header serializes");

        let mut tensors: Vec<(String, Vec<usize>, &[f32])> = self.params.tensors();
        if let Some(opt) = &self.optimizer {
            for (prefix, p) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
                tensors.extend(p.tensors().into_iter().map(|(n, s, v)| (format!("{prefix}{n}"), s, v)));
            }
        }
        let payload: usize = tensors.iter().map(|(n, s, v)| 8 + n.len() + 4 * s.len() + 4 * v.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + text.len() + payload);
        let u32le = |out: &mut Vec<u8>, x: usize| out.extend_from_slice(&(x as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        u32le(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        u32le(&mut out, tensors.len());
        for (name, shape, values) in tensors {
            u32le(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            u32le(&mut out, shape.len());
            for d in shape {
                u32le(&mut out, d);
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            let n = bytes.len().min(MAGIC.len());
            return Err(Error::Version {
                expected: "NSPP1".into(),
                found: String::from_utf8_lossy(&bytes[..n]).trim_end().to_string(),
            });
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let header_len = r.u32().ok_or_else(|| corrupt("truncated header length".into()))? as usize;
        let text = r
            .take(header_len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| corrupt("unreadable header".into()))?;
        let header: Header = toml::from_str(text).map_err(|e| corrupt(format!("header: {e}")))?;
        header.model.validate()?;

        let count = r.u32().ok_or_else(|| corrupt("truncated tensor count".into()))?;
        let mut found: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
        for _ in 0..count {
            let tensor = (|| {
                let len = r.u32()? as usize;
                let name = String::from_utf8(r.take(len)?.to_vec()).ok()?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Option<Vec<_>>>()?;
                let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
                let data = r.take(n.checked_mul(4)?)?;
                let values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Some((name, shape, values))
            })()
            .ok_or_else(|| corrupt("truncated tensor record".into()))?;
            if found.insert(tensor.0.clone(), (tensor.1, tensor.2)).is_some() {
                return Err(corrupt(format!("duplicate tensor {}", tensor.0)));
            }
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut fill = |target: &mut ModelParams<f32>, prefix: &str| -> Result<()> {
            let expected: Vec<(String, Vec<usize>)> =
                target.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
            for ((name, slot), (_, shape)) in target.tensors_mut().into_iter().zip(expected) {
                let key = format!("{prefix}{name}");
                let (s, v) = found
                    .remove(&key)
                    .ok_or_else(|| corrupt(format!("missing tensor {key}")))?;
                if s != shape {
                    return Err(corrupt(format!("tensor {key} has shape {s:?}, config implies {shape:?}")));
                }
                slot.copy_from_slice(&v);
            }
            Ok(())
        };
        let mut params = ModelParams::zeros(&header.model);
        fill(&mut params, "")?;
        let optimizer = match header.optimizer {
            Some(h) => {
                let mut opt = AdamW::new(h.adamw, &header.model)?;
                opt.step = h.step;
                fill(&mut opt.m, "adam.m.")?;
                fill(&mut opt.v, "adam.v.")?;
                Some(opt)
            }
            None => None,
        };
        if let Some(extra) = found.keys().next() {
            return Err(corrupt(format!("unexpected tensor {extra}")));
        }
        let mut header = header;
        header.optimizer = None;
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// Loads only the network for evaluation; optimizer state is ignored.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    Checkpoint::load(path)?.into_model()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
