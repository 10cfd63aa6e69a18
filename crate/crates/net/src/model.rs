//! The segmentation model: image encoder, prompt encoder with low-rank
//! deltas, prompt adapters and a two-way transformer mask decoder.
//!
//! All activations are rank-2 `[tokens, channels]` matrices. A forward pass
//! processes one (image, prompt) pair; batching happens in the trainer by
//! accumulating per-sample losses.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::layers::{causal_bias, Activation, Attention, LayerNorm, Linear, LoraSpec, Mlp, TransformerBlock};
use crate::params::{Init, ParamGroup, ParamStore};
use crate::preprocess::{patchify, postprocess, prepare_image, PreparedImage, ProbabilityMap};
use crate::tokenizer::{tokenize, EOS, VOCAB_SIZE};

#[derive(Debug)]
struct ImageEncoder {
    patch: Linear,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl ImageEncoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let g = ParamGroup::ImageEncoder;
        let patch = Linear::new(store, "image_encoder.patch", cfg.patch_dim(), cfg.d_img, true, g)?;
        let pos = store.create("image_encoder.pos", (cfg.num_patches(), cfg.d_img), Init::Normal(0.02), g)?;
        let blocks = (0..cfg.image_layers)
            .map(|i| TransformerBlock::new(store, &format!("image_encoder.block{i}"), cfg.d_img, cfg.image_heads, g, None))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, "image_encoder.norm", cfg.d_img, g)?;
        Ok(ImageEncoder {
            patch,
            pos,
            blocks,
            norm,
        })
    }

    fn forward(&self, patches: &Tensor) -> Result<Tensor> {
        let mut x = (self.patch.forward(patches)? + &self.pos)?;
        for b in &self.blocks {
            x = b.forward(&x, None)?;
        }
        self.norm.forward(&x)
    }
}

#[derive(Debug)]
struct PromptEncoder {
    tokens: Tensor,
    image_proj: Linear,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    grid: usize,
}

impl PromptEncoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let g = ParamGroup::PromptBase;
        let lora = Some(LoraSpec {
            rank: cfg.lora_rank,
            scaling: cfg.lora_scaling(),
        });
        let tokens = store.create("prompt_encoder.tokens", (VOCAB_SIZE, cfg.d_t), Init::Normal(0.02), g)?;
        let image_proj =
            Linear::with_lora(store, "prompt_encoder.image_proj", 4 * cfg.patch_dim(), cfg.d_t, true, g, lora)?;
        let max_len = cfg.num_patches() / 4 + cfg.max_text_tokens + 1;
        let pos = store.create("prompt_encoder.pos", (max_len, cfg.d_t), Init::Normal(0.02), g)?;
        let blocks = (0..cfg.prompt_layers)
            .map(|i| TransformerBlock::new(store, &format!("prompt_encoder.block{i}"), cfg.d_t, cfg.prompt_heads, g, lora))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, "prompt_encoder.norm", cfg.d_t, g)?;
        Ok(PromptEncoder {
            tokens,
            image_proj,
            pos,
            blocks,
            norm,
            grid: cfg.grid_side(),
        })
    }

    /// Concatenates each 2x2 block of neighbouring patches into one visual token.
    /// Final states for the text tokens followed by the end marker, `[T + 1, d_t]`.
    fn forward(&self, patches: Option<&Tensor>, ids: &[u32]) -> Result<Tensor> {
        let device = self.tokens.device();
        let mut with_eos = ids.to_vec();
        with_eos.push(EOS);
        let n_text = with_eos.len();
        let idx = Tensor::new(with_eos.as_slice(), device)?;
        let text = self.tokens.index_select(&idx, 0)?;
        let x = match patches {
            Some(p) => Tensor::cat(&[self.image_proj.forward(&merge_2x2(p, self.grid)?)?, text], 0)?,
            None => text,
        };
        let len = x.dim(0)?;
        let mut x = (x + self.pos.narrow(0, 0, len)?)?;
        let bias = causal_bias(len, x.dtype(), device)?;
        for b in &self.blocks {
            x = b.forward(&x, Some(&bias))?;
        }
        let x = self.norm.forward(&x)?;
        Ok(x.narrow(0, len - n_text, n_text)?)
    }
}

/// Maps prompt-encoder states into the decoder's prompt space.
#[derive(Debug)]
struct PromptAdapter {
    norm: LayerNorm,
    sparse: Linear,
    dense1: Linear,
    dense2: Linear,
}

impl PromptAdapter {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let g = ParamGroup::Adapter;
        Ok(PromptAdapter {
            norm: LayerNorm::new(store, "adapter.norm", cfg.d_t, g)?,
            sparse: Linear::new(store, "adapter.sparse", cfg.d_t, cfg.d_dec, true, g)?,
            dense1: Linear::new(store, "adapter.dense1", cfg.d_t, cfg.d_dec, true, g)?,
            dense2: Linear::new(store, "adapter.dense2", cfg.d_dec, cfg.d_dec, true, g)?,
        })
    }

    fn sparse(&self, states: &Tensor) -> Result<Tensor> {
        self.sparse.forward(&self.norm.forward(states)?)
    }

    fn dense(&self, eos: &Tensor) -> Result<Tensor> {
        self.dense2.forward(&self.dense1.forward(eos)?.silu()?)
    }
}

#[derive(Debug)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    image_to_token: Attention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, skip_first_pe: bool) -> Result<Self> {
        let g = ParamGroup::Decoder;
        let half = d / 2;
        let cross_heads = if half.is_multiple_of(heads) { heads } else { 1 };
        Ok(TwoWayBlock {
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, d, heads, g, None)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, g)?,
            token_to_image: Attention::new(store, &format!("{name}.t2i"), d, half, cross_heads, g, None)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, g)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, 4 * d, d, Activation::Gelu, g, None)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d, g)?,
            image_to_token: Attention::new(store, &format!("{name}.i2t"), d, half, cross_heads, g, None)?,
            norm4: LayerNorm::new(store, &format!("{name}.norm4"), d, g)?,
            skip_first_pe,
        })
    }

    fn forward(&self, q: &Tensor, k: &Tensor, q_pe: &Tensor, k_pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = if self.skip_first_pe {
            self.self_attn.forward(q, q, q, None)?
        } else {
            let qp = (q + q_pe)?;
            (q + self.self_attn.forward(&qp, &qp, q, None)?)?
        };
        let q = self.norm1.forward(&q)?;
        let kp = (k + k_pe)?;
        let q = (&q + self.token_to_image.forward(&(&q + q_pe)?, &kp, k, None)?)?;
        let q = self.norm2.forward(&q)?;
        let q = self.norm3.forward(&(&q + self.mlp.forward(&q)?)?)?;
        let qp = (&q + q_pe)?;
        let k = (k + self.image_to_token.forward(&kp, &qp, &q, None)?)?;
        let k = self.norm4.forward(&k)?;
        Ok((q, k))
    }
}

#[derive(Debug)]
struct MaskDecoder {
    image_proj: Linear,
    output_token: Tensor,
    image_pe: Tensor,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    final_norm: LayerNorm,
    up1: Linear,
    up_norm: LayerNorm,
    up2: Linear,
    hyper: Mlp,
    upsample: Tensor,
    grid: usize,
    d: usize,
}

impl MaskDecoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let g = ParamGroup::Decoder;
        let d = cfg.d_dec;
        let grid = cfg.grid_side();
        let image_pe = sinusoidal_grid(grid, d, store.dtype(), store.device())?;
        let upsample = bilinear_matrix(cfg.image_size, 4 * grid, store.dtype(), store.device())?;
        let half = d / 2;
        let heads = if half.is_multiple_of(cfg.decoder_heads) { cfg.decoder_heads } else { 1 };
        Ok(MaskDecoder {
            image_proj: Linear::new(store, "decoder.image_proj", cfg.d_img, d, true, g)?,
            output_token: store.create("decoder.output_token", (1, d), Init::Normal(1.0), g)?,
            image_pe,
            blocks: (0..cfg.decoder_blocks)
                .map(|i| TwoWayBlock::new(store, &format!("decoder.block{i}"), d, cfg.decoder_heads, i == 0))
                .collect::<Result<_>>()?,
            final_attn: Attention::new(store, "decoder.final_attn", d, half, heads, g, None)?,
            final_norm: LayerNorm::new(store, "decoder.final_norm", d, g)?,
            up1: Linear::new(store, "decoder.up1", d, d, true, g)?,
            up_norm: LayerNorm::new(store, "decoder.up_norm", d / 4, g)?,
            up2: Linear::new(store, "decoder.up2", d / 4, d / 2, true, g)?,
            hyper: Mlp::new(store, "decoder.hyper", d, d, d / 8, Activation::Gelu, g, None)?,
            upsample,
            grid,
            d,
        })
    }

    /// Returns mask logits `[image_size, image_size]`.
    fn forward(&self, image_embedding: &Tensor, sparse: &Tensor, dense: &Tensor) -> Result<Tensor> {
        let queries = Tensor::cat(&[&self.output_token, sparse], 0)?;
        let keys = self.image_proj.forward(image_embedding)?.broadcast_add(dense)?;
        let (mut q, mut k) = (queries.clone(), keys);
        for b in &self.blocks {
            (q, k) = b.forward(&q, &k, &queries, &self.image_pe)?;
        }
        let qp = (&q + &queries)?;
        let kp = (&k + &self.image_pe)?;
        let q = self.final_norm.forward(&(&q + self.final_attn.forward(&qp, &kp, &k, None)?)?)?;

        let up = pixel_shuffle(&self.up1.forward(&k)?, self.grid, self.d / 4)?;
        let up = self.up_norm.forward(&up)?.gelu()?;
        let up = pixel_shuffle(&self.up2.forward(&up)?, 2 * self.grid, self.d / 8)?.gelu()?;
        let weights = self.hyper.forward(&q.narrow(0, 0, 1)?)?;
        let side = 4 * self.grid;
        let low = up.matmul(&weights.t()?)?.reshape((side, side))?;
        Ok(self.upsample.matmul(&low)?.matmul(&self.upsample.t()?)?)
    }
}

/// Row-major `[grid², d]` patches to `[(grid/2)², 4d]`; each output row is the
/// concatenation of a 2×2 block in reading order.
fn merge_2x2(patches: &Tensor, grid: usize) -> Result<Tensor> {
    let (n, pd) = patches.dims2()?;
    let h = grid / 2;
    Ok(patches
        .reshape((h, 2, h, 2, pd))?
        .permute((0, 2, 1, 3, 4))?
        .contiguous()?
        .reshape((n / 4, 4 * pd))?)
}

/// `[g*g, 4c]` (channels ordered `dy, dx, c`) to `[(2g)*(2g), c]`, i.e. a
/// stride-2, kernel-2 transposed convolution after the per-pixel linear map.
fn pixel_shuffle(x: &Tensor, g: usize, c: usize) -> Result<Tensor> {
    Ok(x
        .reshape((g, g, 2, 2, c))?
        .permute((0, 2, 1, 3, 4))?
        .contiguous()?
        .reshape((4 * g * g, c))?)
}

/// Fixed 2-D sine/cosine position code for a `g`x`g` grid, `[g*g, d]`.
fn sinusoidal_grid(g: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let quarter = d / 4;
    let mut v = Vec::with_capacity(g * g * d);
    for y in 0..g {
        for x in 0..g {
            for coord in [y, x] {
                for k in 0..quarter {
                    let f = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    v.push((coord as f64 * f).sin());
                }
                for k in 0..quarter {
                    let f = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    v.push((coord as f64 * f).cos());
                }
            }
        }
    }
    Ok(Tensor::from_vec(v, (g * g, d), device)?.to_dtype(dtype)?)
}

/// Row-interpolation matrix `[dst, src]` for half-pixel bilinear resizing.
pub(crate) fn bilinear_matrix(dst: usize, src: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; dst * src];
    for d in 0..dst {
        let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        let f = (s - i0 as f64).min(1.0);
        m[d * src + i0] += 1.0 - f;
        m[d * src + i1] += f;
    }
    Ok(Tensor::from_vec(m, (dst, src), device)?.to_dtype(dtype)?)
}

/// Prompt-encoder output restricted to text positions.
#[derive(Debug, Clone)]
pub struct PromptEncoding {
    /// `[T, d_t]`
    pub text_states: Tensor,
    /// `[1, d_t]`, the state at the appended end marker.
    pub eos_state: Tensor,
}

/// Decoder prompt: `[T, d_dec]` sparse tokens and a `[1, d_dec]` dense vector.
#[derive(Debug, Clone)]
pub struct AdaptedPrompt {
    pub sparse: Tensor,
    pub dense: Tensor,
}

/// Prediction in the padded model frame, `[image_size, image_size]`.
#[derive(Debug, Clone)]
pub struct MaskPrediction {
    pub logits: Tensor,
    pub probabilities: Tensor,
}

impl MaskPrediction {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let probabilities = candle_nn::ops::sigmoid(&logits)?;
        Ok(MaskPrediction { logits, probabilities })
    }
}

#[derive(Debug)]
pub struct SegModel {
    cfg: ModelConfig,
    store: ParamStore,
    image_encoder: ImageEncoder,
    prompt_encoder: PromptEncoder,
    adapter: PromptAdapter,
    decoder: MaskDecoder,
    cache: Mutex<HashMap<[u8; 32], Tensor>>,
    cache_enabled: AtomicBool,
    encoder_calls: AtomicUsize,
}

impl SegModel {
    pub fn new(cfg: ModelConfig, dtype: DType, device: Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, device, cfg.init_seed);
        let image_encoder = ImageEncoder::new(&mut store, &cfg)?;
        let prompt_encoder = PromptEncoder::new(&mut store, &cfg)?;
        let adapter = PromptAdapter::new(&mut store, &cfg)?;
        let decoder = MaskDecoder::new(&mut store, &cfg)?;
        Ok(SegModel {
            cfg,
            store,
            image_encoder,
            prompt_encoder,
            adapter,
            decoder,
            cache: Mutex::new(HashMap::new()),
            cache_enabled: AtomicBool::new(false),
            encoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Reuse image embeddings across prompts for the same image. Only valid
    /// while image-encoder weights do not change; cached entries are detached.
    pub fn set_embedding_cache(&self, enabled: bool) {
        self.cache_enabled.store(enabled, Ordering::SeqCst);
        if !enabled {
            self.cache.lock().expect("cache lock").clear();
        }
    }

    /// Number of image-encoder evaluations since construction.
    pub fn image_encoder_calls(&self) -> usize {
        self.encoder_calls.load(Ordering::SeqCst)
    }

    pub fn prepare(&self, image: &RgbImage) -> PreparedImage {
        prepare_image(image, self.cfg.image_size)
    }

    pub fn patches(&self, prepared: &PreparedImage) -> Result<Tensor> {
        patchify(prepared, &self.cfg, self.dtype(), self.device())
    }

    /// `[H'*W', d_img]` image embedding.
    pub fn encode_image(&self, prepared: &PreparedImage, patches: &Tensor) -> Result<Tensor> {
        let caching = self.cache_enabled.load(Ordering::SeqCst);
        if caching {
            if let Some(t) = self.cache.lock().expect("cache lock").get(&prepared.key) {
                return Ok(t.clone());
            }
        }
        self.encoder_calls.fetch_add(1, Ordering::SeqCst);
        let emb = self.image_encoder.forward(patches)?;
        if caching {
            let emb = emb.detach();
            self.cache.lock().expect("cache lock").insert(prepared.key, emb.clone());
            return Ok(emb);
        }
        Ok(emb)
    }

    pub fn encode_prompt(&self, patches: &Tensor, text: &str) -> Result<PromptEncoding> {
        let ids = tokenize(text, self.cfg.max_text_tokens)?;
        let image = if self.cfg.text_only { None } else { Some(patches) };
        let states = self.prompt_encoder.forward(image, &ids)?;
        let t = ids.len();
        Ok(PromptEncoding {
            text_states: states.narrow(0, 0, t)?,
            eos_state: states.narrow(0, t, 1)?,
        })
    }

    pub fn adapt_prompt(&self, enc: &PromptEncoding) -> Result<AdaptedPrompt> {
        Ok(AdaptedPrompt {
            sparse: self.adapter.sparse(&enc.text_states)?,
            dense: self.adapter.dense(&enc.eos_state)?,
        })
    }

    /// Sparse-prompt adapter alone, `[n, d_t] -> [n, d_dec]`.
    pub fn sparse_adapter(&self, states: &Tensor) -> Result<Tensor> {
        self.adapter.sparse(states)
    }

    /// Dense-prompt adapter alone, `[1, d_t] -> [1, d_dec]`.
    pub fn dense_adapter(&self, eos_state: &Tensor) -> Result<Tensor> {
        self.adapter.dense(eos_state)
    }

    pub fn decode_mask(&self, image_embedding: &Tensor, prompt: &AdaptedPrompt) -> Result<MaskPrediction> {
        MaskPrediction::from_logits(self.decoder.forward(image_embedding, &prompt.sparse, &prompt.dense)?)
    }

    /// Full forward pass in the padded model frame.
    pub fn forward(&self, prepared: &PreparedImage, text: &str) -> Result<MaskPrediction> {
        let patches = self.patches(prepared)?;
        let emb = self.encode_image(prepared, &patches)?;
        let enc = self.encode_prompt(&patches, text)?;
        let prompt = self.adapt_prompt(&enc)?;
        self.decode_mask(&emb, &prompt)
    }

    /// Foreground probabilities at the image's original resolution.
    pub fn predict(&self, image: &RgbImage, text: &str) -> Result<ProbabilityMap> {
        let prepared = self.prepare(image);
        self.predict_prepared(&prepared, text)
    }

    pub fn predict_prepared(&self, prepared: &PreparedImage, text: &str) -> Result<ProbabilityMap> {
        let probs = self
            .forward(prepared, text)?
            .probabilities
            .flatten_all()?
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?;
        Ok(postprocess(&probs, prepared))
    }
}
