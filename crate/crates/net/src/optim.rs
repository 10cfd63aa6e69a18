//! AdamW with decoupled weight decay and exportable moment state.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    names: Vec<String>,
    params: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let mut names = Vec::with_capacity(params.len());
        let mut vars = Vec::with_capacity(params.len());
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, var) in params {
            m.push(var.as_tensor().zeros_like()?);
            v.push(var.as_tensor().zeros_like()?);
            names.push(name);
            vars.push(var);
        }
        Ok(AdamW {
            cfg,
            names,
            params: vars,
            m,
            v,
            steps: 0,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vars(&self) -> &[Var] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update; `grads[i]` belongs to `vars()[i]`, `None` means zero gradient.
    pub fn step(&mut self, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(NetError::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, var) in self.params.iter().enumerate() {
            let theta = var.as_tensor().detach();
            let g = match &grads[i] {
                Some(g) => g.detach(),
                None => theta.zeros_like()?,
            };
            let m = ((&self.m[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let decayed = (&theta * (1.0 - lr * c.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// `(name, m, v)` for every parameter, in optimizer order.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.names
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|(n, (m, v))| (n.as_str(), m, v))
    }

    pub fn restore(&mut self, steps: u64, mut lookup: impl FnMut(&str) -> Option<(Tensor, Tensor)>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let (m, v) = lookup(name)
                .ok_or_else(|| NetError::Checkpoint(format!("optimizer state for {name} missing")))?;
            let shape = self.params[i].shape();
            if m.shape() != shape || v.shape() != shape {
                return Err(NetError::Checkpoint(format!("optimizer state for {name} has the wrong shape")));
            }
            let dtype = self.params[i].dtype();
            self.m[i] = m.to_dtype(dtype)?;
            self.v[i] = v.to_dtype(dtype)?;
        }
        self.steps = steps;
        Ok(())
    }
}
