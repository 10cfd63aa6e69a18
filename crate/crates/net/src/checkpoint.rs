//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "CVSGCKPT"
//! version   u32      schema version
//! json_len  u64      length of the UTF-8 JSON header
//! json      bytes    CheckpointMeta
//! count     u64      number of tensors
//! per tensor: name_len u32, name bytes, ndim u32, dims u64 x ndim, f32 x prod(dims)
//! ```
//!
//! Tensor names are `param/<name>`, `adam_m/<name>` and `adam_v/<name>`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::curriculum::Phase;
use crate::error::{NetError, Result};
use crate::model::SegModel;
use crate::optim::AdamW;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"CVSGCKPT";
pub const SCHEMA_VERSION: u32 = 1;

/// Running statistics over logged step losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub steps: u64,
    pub sum: f64,
    pub last: f64,
    pub min: f64,
}

impl LossStats {
    pub fn record(&mut self, loss: f64) {
        self.min = if self.steps == 0 { loss } else { self.min.min(loss) };
        self.steps += 1;
        self.sum += loss;
        self.last = loss;
    }

    pub fn mean(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.sum / self.steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub phase: Option<Phase>,
    /// Completed optimizer steps in the current phase.
    #[serde(default)]
    pub step: usize,
    #[serde(default)]
    pub optimizer_steps: u64,
    #[serde(default)]
    pub loss_stats: LossStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(StoredTensor {
            shape: t.dims().to_vec(),
            data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    /// Captures all model parameters and, when given, the optimizer moments.
    pub fn capture(model: &SegModel, optimizer: Option<&AdamW>, meta: CheckpointMeta) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, entry) in model.params().entries() {
            tensors.insert(format!("param/{name}"), StoredTensor::from_tensor(entry.var.as_tensor())?);
        }
        if let Some(opt) = optimizer {
            for (name, m, v) in opt.moments() {
                tensors.insert(format!("adam_m/{name}"), StoredTensor::from_tensor(m)?);
                tensors.insert(format!("adam_v/{name}"), StoredTensor::from_tensor(v)?);
            }
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Copies stored parameters into `model`; every model parameter must be present.
    pub fn load_params(&self, model: &SegModel) -> Result<()> {
        for (name, entry) in model.params().entries() {
            let stored = self
                .tensors
                .get(&format!("param/{name}"))
                .ok_or_else(|| NetError::Checkpoint(format!("parameter {name} missing")))?;
            if stored.shape.as_slice() != entry.var.dims() {
                return Err(NetError::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, model shape {:?}",
                    stored.shape,
                    entry.var.dims()
                )));
            }
            entry.var.set(&stored.to_tensor(entry.var.dtype(), entry.var.device())?)?;
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, optimizer: &mut AdamW) -> Result<()> {
        let dtype = optimizer.vars().first().map(|v| v.dtype()).unwrap_or(DType::F32);
        let device = optimizer.vars().first().map(|v| v.device().clone()).unwrap_or(Device::Cpu);
        let tensors = &self.tensors;
        optimizer.restore(self.meta.optimizer_steps, |name| {
            let m = tensors.get(&format!("adam_m/{name}"))?.to_tensor(dtype, &device).ok()?;
            let v = tensors.get(&format!("adam_v/{name}"))?.to_tensor(dtype, &device).ok()?;
            Some((m, v))
        })
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.tensors.keys().any(|k| k.starts_with("adam_m/"))
    }

    /// Builds a model from the stored configuration and parameters.
    pub fn to_model(&self, dtype: DType, device: Device) -> Result<SegModel> {
        let model = SegModel::new(self.meta.model.clone(), dtype, device)?;
        self.load_params(&model)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(NetError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version == 0 || version > SCHEMA_VERSION {
            return Err(NetError::Checkpoint(format!(
                "schema version {version} is not supported (reader supports up to {SCHEMA_VERSION})"
            )));
        }
        let json_len = read_u64(&mut r)? as usize;
        if json_len > r.len() {
            return Err(NetError::Checkpoint("truncated header".into()));
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(&r[..json_len]).map_err(|e| NetError::Checkpoint(format!("header: {e}")))?;
        r = &r[json_len..];
        let count = read_u64(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > r.len() {
                return Err(NetError::Checkpoint("truncated tensor name".into()));
            }
            let name = std::str::from_utf8(&r[..name_len])
                .map_err(|_| NetError::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            r = &r[name_len..];
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n.checked_mul(4).is_none_or(|b| b > r.len()) {
                return Err(NetError::Checkpoint(format!("tensor {name} truncated")));
            }
            let data = r[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[4 * n..];
            tensors.insert(name, StoredTensor { shape, data });
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| NetError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(&tmp).map_err(|e| NetError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| NetError::io(&tmp, e))?;
        f.sync_all().map_err(|e| NetError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| NetError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| NetError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| NetError::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
