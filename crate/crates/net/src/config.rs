use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

/// Which parameters are trained.
///
/// `Tiny` trains everything (the backbones start from random weights).
/// `Full` keeps the image encoder and the prompt-encoder base weights frozen
/// and trains only the low-rank deltas, the adapters and the mask decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Tiny,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square, padded model input.
    pub image_size: usize,
    pub patch_stride: usize,
    pub d_img: usize,
    pub d_dec: usize,
    pub d_t: usize,
    pub image_layers: usize,
    pub image_heads: usize,
    pub prompt_layers: usize,
    pub prompt_heads: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Maximum number of text tokens (excluding the end marker).
    pub max_text_tokens: usize,
    /// Feed only text to the prompt encoder (no image tokens).
    #[serde(default)]
    pub text_only: bool,
    pub scale: Scale,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 256,
            patch_stride: 16,
            d_img: 32,
            d_dec: 32,
            d_t: 48,
            image_layers: 1,
            image_heads: 4,
            prompt_layers: 2,
            prompt_heads: 4,
            decoder_blocks: 2,
            decoder_heads: 4,
            lora_rank: 16,
            lora_alpha: 32.0,
            max_text_tokens: 96,
            text_only: false,
            scale: Scale::Tiny,
            init_seed: 0,
        }
    }

    /// Production-sized layout with frozen backbones; weights must come from a checkpoint.
    pub fn full() -> Self {
        ModelConfig {
            image_size: 1024,
            patch_stride: 16,
            d_img: 256,
            d_dec: 256,
            d_t: 2048,
            image_layers: 24,
            image_heads: 16,
            prompt_layers: 36,
            prompt_heads: 16,
            decoder_blocks: 2,
            decoder_heads: 8,
            lora_rank: 16,
            lora_alpha: 32.0,
            max_text_tokens: 256,
            text_only: false,
            scale: Scale::Full,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(NetError::Config(m));
        if self.patch_stride == 0 || !self.image_size.is_multiple_of(self.patch_stride) {
            return err(format!(
                "image_size {} not divisible by patch_stride {}",
                self.image_size, self.patch_stride
            ));
        }
        if self.decoder_heads == 0 || !self.d_dec.is_multiple_of(self.decoder_heads) {
            return err(format!("d_dec {} not divisible by decoder_heads {}", self.d_dec, self.decoder_heads));
        }
        if !self.d_dec.is_multiple_of(8) {
            return err(format!("d_dec {} must be a multiple of 8 for the upscaling path", self.d_dec));
        }
        if self.prompt_heads == 0 || !self.d_t.is_multiple_of(self.prompt_heads) {
            return err(format!("d_t {} not divisible by prompt_heads {}", self.d_t, self.prompt_heads));
        }
        if self.image_heads == 0 || !self.d_img.is_multiple_of(self.image_heads) {
            return err(format!("d_img {} not divisible by image_heads {}", self.d_img, self.image_heads));
        }
        if !self.grid_side().is_multiple_of(2) {
            return err(format!("patch grid side {} must be even", self.grid_side()));
        }
        let upscaled = 4 * self.grid_side();
        if !self.image_size.is_multiple_of(upscaled) {
            return err(format!("image_size {} is not a multiple of the decoder output {upscaled}", self.image_size));
        }
        if self.max_text_tokens == 0 {
            return err("max_text_tokens must be positive".into());
        }
        Ok(())
    }

    /// `H' = W' = image_size / patch_stride`.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_stride
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_stride * self.patch_stride
    }

    pub fn lora_scaling(&self) -> f64 {
        if self.lora_rank == 0 {
            0.0
        } else {
            self.lora_alpha / self.lora_rank as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::full().validate().unwrap();
        assert_eq!(ModelConfig::tiny().grid_side(), 16);
        assert_eq!(ModelConfig::tiny().lora_scaling(), 2.0);
    }

    #[test]
    fn rejects_indivisible_shapes() {
        let mut c = ModelConfig::tiny();
        c.image_size = 250;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.decoder_heads = 5;
        assert!(c.validate().is_err());
    }
}
