//! Named, grouped parameter storage.
//!
//! Modules hold clones of the tensors handed out here; because `Var::set`
//! overwrites storage in place, optimizer updates and checkpoint loads are
//! visible to every module without rebuilding it.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Scale;
use crate::error::{NetError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    ImageEncoder,
    /// Base weights of the prompt encoder (embeddings, attention, MLP, norms).
    PromptBase,
    /// Low-rank deltas attached to prompt-encoder linear layers.
    PromptLora,
    Adapter,
    Decoder,
}

impl ParamGroup {
    pub fn is_trainable(self, scale: Scale) -> bool {
        match scale {
            Scale::Tiny => true,
            Scale::Full => !matches!(self, ParamGroup::ImageEncoder | ParamGroup::PromptBase),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub var: Var,
    pub group: ParamGroup,
}

#[derive(Debug)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        ParamStore {
            device,
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            entries: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a new parameter and returns a tensor view of it.
    pub fn create(&mut self, name: &str, shape: impl Into<Shape>, init: Init, group: ParamGroup) -> Result<Tensor> {
        if self.entries.contains_key(name) {
            return Err(NetError::Config(format!("parameter {name} registered twice")));
        }
        let shape: Shape = shape.into();
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n).map(|_| std * standard_normal(&mut self.rng)).collect(),
            Init::Uniform(b) => (0..n).map(|_| self.rng.gen_range(-b..=b)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let view = var.as_tensor().clone();
        self.entries.insert(name.to_string(), ParamEntry { var, group });
        Ok(view)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.var.elem_count()).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    /// Parameters the optimizer updates at `scale`, in name order.
    pub fn trainable(&self, scale: Scale) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.group.is_trainable(scale))
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    pub fn values_f64(&self, name: &str) -> Result<Vec<f64>> {
        let e = self.lookup(name)?;
        Ok(e.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }

    /// Overwrites a parameter in place; `values` must match its element count.
    pub fn set_values_f64(&self, name: &str, values: &[f64]) -> Result<()> {
        let e = self.lookup(name)?;
        let shape = e.var.shape().clone();
        if shape.elem_count() != values.len() {
            return Err(NetError::Shape(format!(
                "{name}: expected {} values, got {}",
                shape.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_vec(values.to_vec(), shape, &self.device)?.to_dtype(self.dtype)?;
        e.var.set(&t)?;
        Ok(())
    }

    fn lookup(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| NetError::Checkpoint(format!("unknown parameter {name}")))
    }
}

/// Box-Muller; one draw per call keeps the stream position easy to reason about.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
