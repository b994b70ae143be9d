//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PDCKPT1\n"
//! u32 metadata length, metadata as JSON
//! u32 array count
//! per array: u16 name length, name, u8 rank, u32 dims..., f32 data
//! ```
//!
//! Arrays are model parameters by name, followed by optimizer moments
//! (`optim.m.<name>`, `optim.v.<name>`) when training state is saved.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, NUM_LAYERS};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Params, Tensor};
use crate::task::Task;
use crate::trainer::{Adam, AdamConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"PDCKPT1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub task: Task,
    pub model: ModelConfig,
    pub denoiser: DenoiserConfig,
    pub num_layers: usize,
    pub diffusion: DiffusionConfig,
    /// Optimizer updates completed.
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, diffusion: &DiffusionConfig) -> Self {
        Self {
            meta: meta_for(&state.model, diffusion, state.step, Some(state.opt.config)),
            model: state.model.clone(),
            optimizer: Some(state.opt.clone()),
        }
    }

    pub fn from_model(model: &Model<f32>, diffusion: &DiffusionConfig, step: u64) -> Self {
        Self { meta: meta_for(model, diffusion, step, None), model: model.clone(), optimizer: None }
    }

    /// Training state for resuming; fresh optimizer moments if none were stored.
    pub fn into_state(self, fallback: AdamConfig) -> TrainState {
        let opt = self.optimizer.unwrap_or_else(|| Adam::new(fallback, &self.model));
        TrainState { model: self.model, opt, step: self.meta.step }
    }

    /// Fails unless the checkpoint was trained for `task`.
    pub fn expect_task(&self, task: Task) -> Result<()> {
        let (expected, found) = (task.position_dim(), self.meta.denoiser.position_dim);
        if expected != found {
            return Err(Error::DimensionMismatch { what: "position dimension n".into(), expected, found });
        }
        if self.meta.task != task {
            return Err(Error::TaskMismatch { expected: task.to_string(), got: self.meta.task.to_string() });
        }
        Ok(())
    }

    /// Fails unless the stored schedule has `steps` diffusion steps.
    pub fn expect_steps(&self, steps: usize) -> Result<()> {
        if self.meta.denoiser.steps != steps {
            return Err(Error::DimensionMismatch {
                what: "diffusion steps T".into(),
                expected: steps,
                found: self.meta.denoiser.steps,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);

        let mut arrays: Vec<(String, &Tensor<f32>)> = self.model.named_tensors();
        if let Some(opt) = &self.optimizer {
            let names: Vec<String> = arrays.iter().map(|(n, _)| n.clone()).collect();
            for (n, m) in names.iter().zip(&opt.m) {
                arrays.push((format!("optim.m.{n}"), m));
            }
            for (n, v) in names.iter().zip(&opt.v) {
                arrays.push((format!("optim.v.{n}"), v));
            }
        }
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::BadMagic);
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::DimensionMismatch {
                what: "checkpoint format version".into(),
                expected: FORMAT_VERSION as usize,
                found: meta.format_version as usize,
            });
        }
        if meta.num_layers != NUM_LAYERS {
            return Err(Error::DimensionMismatch {
                what: "attention layer count".into(),
                expected: NUM_LAYERS,
                found: meta.num_layers,
            });
        }
        let expected_n = meta.task.position_dim();
        if meta.denoiser.position_dim != expected_n {
            return Err(Error::DimensionMismatch {
                what: "position dimension n".into(),
                expected: expected_n,
                found: meta.denoiser.position_dim,
            });
        }

        let count = r.u32("array count")? as usize;
        let mut arrays = std::collections::HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16("array name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "array name")?.to_vec())
                .map_err(|_| Error::Truncated("array name is not UTF-8".into()))?;
            let rank = r.take(1, "array rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("array shape")? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len * 4, &name)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            arrays.insert(name, Tensor::from_vec(&shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Truncated(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut model: Model<f32> = Model::new(meta.task, &meta.model, meta.denoiser.steps)?;
        if model.denoiser.config != meta.denoiser {
            return Err(Error::InvalidConfig("denoiser dimensions disagree with the model configuration".into()));
        }
        let mut fill = |prefix: &str, model_names: &[String], dst: &mut Vec<&mut Tensor<f32>>| -> Result<()> {
            for (name, slot) in model_names.iter().zip(dst.iter_mut()) {
                let key = format!("{prefix}{name}");
                let src = arrays.remove(&key).ok_or_else(|| Error::MissingArray(key.clone()))?;
                if src.shape != slot.shape {
                    return Err(Error::DimensionMismatch {
                        what: format!("`{key}` length"),
                        expected: slot.len(),
                        found: src.len(),
                    });
                }
                **slot = src;
            }
            Ok(())
        };
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        fill("", &names, &mut model.tensors_mut())?;
        let optimizer = match meta.optimizer {
            Some(cfg) => {
                let mut opt = Adam::new(cfg, &model);
                opt.t = meta.step;
                fill("optim.m.", &names, &mut opt.m.iter_mut().collect())?;
                fill("optim.v.", &names, &mut opt.v.iter_mut().collect())?;
                Some(opt)
            }
            None => None,
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::InvalidConfig(format!("unexpected array `{extra}` in checkpoint")));
        }
        Ok(Self { meta, model, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn meta_for(model: &Model<f32>, diffusion: &DiffusionConfig, step: u64, optimizer: Option<AdamConfig>) -> CheckpointMeta {
    CheckpointMeta {
        format_version: FORMAT_VERSION,
        task: model.task,
        model: model.config.clone(),
        denoiser: model.denoiser.config.clone(),
        num_layers: model.denoiser.layers.len(),
        diffusion: diffusion.clone(),
        step,
        optimizer,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("file ends inside {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}
