//! Building blocks on rank-2 token matrices `[tokens, channels]`.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::{Init, ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct LoraSpec {
    pub rank: usize,
    pub scaling: f64,
}

#[derive(Debug, Clone)]
struct LoraDelta {
    a: Tensor,
    b: Tensor,
    scaling: f64,
}

/// `y = x W + b`, with `W` stored as `[in, out]`, plus an optional low-rank
/// delta `scaling * x A B` whose `B` starts at zero.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    lora: Option<LoraDelta>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Result<Self> {
        Self::with_lora(store, name, d_in, d_out, bias, group, None)
    }

    pub fn with_lora(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        group: ParamGroup,
        lora: Option<LoraSpec>,
    ) -> Result<Self> {
        let bound = (1.0 / d_in as f64).sqrt();
        let weight = store.create(&format!("{name}.weight"), (d_in, d_out), Init::Uniform(bound), group)?;
        let bias = if bias {
            Some(store.create(&format!("{name}.bias"), (1, d_out), Init::Zeros, group)?)
        } else {
            None
        };
        let lora = match lora {
            Some(spec) if spec.rank > 0 => Some(LoraDelta {
                a: store.create(
                    &format!("{name}.lora_a"),
                    (d_in, spec.rank),
                    Init::Uniform(bound),
                    ParamGroup::PromptLora,
                )?,
                b: store.create(&format!("{name}.lora_b"), (spec.rank, d_out), Init::Zeros, ParamGroup::PromptLora)?,
                scaling: spec.scaling,
            }),
            _ => None,
        };
        Ok(Linear { weight, bias, lora })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight)?;
        if let Some(l) = &self.lora {
            y = (y + (x.matmul(&l.a)?.matmul(&l.b)? * l.scaling)?)?;
        }
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.create(&format!("{name}.gamma"), (1, dim), Init::Ones, group)?,
            beta: store.create(&format!("{name}.beta"), (1, dim), Init::Zeros, group)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Softmax over the last axis. The subtracted maximum is detached; the result
/// is unchanged and its gradient contribution cancels exactly.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_inner: usize,
        heads: usize,
        group: ParamGroup,
        lora: Option<LoraSpec>,
    ) -> Result<Self> {
        let mk = |store: &mut ParamStore, part: &str, i: usize, o: usize| {
            Linear::with_lora(store, &format!("{name}.{part}"), i, o, true, group, lora)
        };
        Ok(Attention {
            q: mk(store, "q", d_model, d_inner)?,
            k: mk(store, "k", d_model, d_inner)?,
            v: mk(store, "v", d_model, d_inner)?,
            o: mk(store, "o", d_inner, d_model)?,
            heads,
            head_dim: d_inner / heads,
        })
    }

    /// `q: [Lq, d]`, `k, v: [Lk, d]`; `bias` is an additive `[Lq, Lk]` mask.
    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let split = |t: Tensor| -> Result<Tensor> {
            let l = t.dim(0)?;
            Ok(t.reshape((l, self.heads, self.head_dim))?.transpose(0, 1)?.contiguous()?)
        };
        let qh = split(self.q.forward(q)?)?;
        let kh = split(self.k.forward(k)?)?;
        let vh = split(self.v.forward(v)?)?;
        let mut scores = (qh.matmul(&kh.transpose(1, 2)?.contiguous()?)? / (self.head_dim as f64).sqrt())?;
        if let Some(b) = bias {
            scores = scores.broadcast_add(b)?;
        }
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&vh)?;
        let lq = q.dim(0)?;
        let merged = out.transpose(0, 1)?.contiguous()?.reshape((lq, self.heads * self.head_dim))?;
        self.o.forward(&merged)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
    act: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        act: Activation,
        group: ParamGroup,
        lora: Option<LoraSpec>,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::with_lora(store, &format!("{name}.fc1"), d_in, d_hidden, true, group, lora)?,
            fc2: Linear::with_lora(store, &format!("{name}.fc2"), d_hidden, d_out, true, group, lora)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?;
        let h = match self.act {
            Activation::Gelu => h.gelu()?,
            Activation::Relu => h.relu()?,
        };
        self.fc2.forward(&h)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        group: ParamGroup,
        lora: Option<LoraSpec>,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, group)?,
            attn: Attention::new(store, &format!("{name}.attn"), d, d, heads, group, lora)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, group)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, 4 * d, d, Activation::Gelu, group, lora)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, &h, bias)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Additive causal mask: 0 on and below the diagonal, a large negative above.
pub fn causal_bias(len: usize, dtype: candle_core::DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut v = vec![0f64; len * len];
    for i in 0..len {
        for j in i + 1..len {
            v[i * len + j] = -1e9;
        }
    }
    Ok(Tensor::from_vec(v, (len, len), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;

    fn store() -> ParamStore {
        ParamStore::new(DType::F64, Device::Cpu, 3)
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_vec2().unwrap()
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let mut s = store();
        let ln = LayerNorm::new(&mut s, "ln", 4, ParamGroup::Decoder).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let y = rows(&ln.forward(&x).unwrap());
        let mean = 3.0;
        let var = (4.0 + 1.0 + 0.0 + 9.0) / 4.0;
        for (i, v) in [1.0, 2.0, 3.0, 6.0].iter().enumerate() {
            assert!((y[0][i] - (v - mean) / (var + 1e-5f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_tolerate_large_inputs() {
        let x = Tensor::new(&[[1000.0f64, 1001.0, 999.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let y = rows(&softmax_last(&x).unwrap());
        for r in &y {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let e: Vec<f64> = [1.0f64, 2.0, 0.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        assert!((y[0][1] - e[1] / z).abs() < 1e-12);
    }

    #[test]
    fn fresh_lora_is_a_no_op() {
        let mut s = store();
        let plain = Linear::new(&mut s, "p", 5, 3, true, ParamGroup::PromptBase).unwrap();
        let mut s2 = store();
        let lora = Linear::with_lora(
            &mut s2,
            "p",
            5,
            3,
            true,
            ParamGroup::PromptBase,
            Some(LoraSpec { rank: 2, scaling: 2.0 }),
        )
        .unwrap();
        let x = Tensor::new(&[[0.1f64, -0.2, 0.3, 0.4, -0.5]], &Device::Cpu).unwrap();
        assert_eq!(rows(&plain.forward(&x).unwrap()), rows(&lora.forward(&x).unwrap()));
    }

    #[test]
    fn causal_attention_ignores_future_tokens() {
        let mut s = store();
        let attn = Attention::new(&mut s, "a", 8, 8, 2, ParamGroup::PromptBase, None).unwrap();
        let dev = Device::Cpu;
        let bias = causal_bias(3, DType::F64, &dev).unwrap();
        let x = Tensor::new(
            &[[0.1f64, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], [1.0; 8], [-1.0; 8]],
            &dev,
        )
        .unwrap();
        let mut x2v = rows(&x);
        x2v[2] = vec![5.0; 8];
        let flat: Vec<f64> = x2v.concat();
        let x2 = Tensor::from_vec(flat, (3, 8), &dev).unwrap();
        let y1 = rows(&attn.forward(&x, &x, &x, Some(&bias)).unwrap());
        let y2 = rows(&attn.forward(&x2, &x2, &x2, Some(&bias)).unwrap());
        assert_eq!(y1[0], y2[0]);
        assert_eq!(y1[1], y2[1]);
        assert_ne!(y1[2], y2[2]);
    }
}
