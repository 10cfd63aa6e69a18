//! Conversions between images/masks and the square, padded model frame.
//!
//! An input is resized so its longer side equals `image_size` and then
//! padded at the bottom/right. Predictions are cropped to the resized region
//! and resized back to the original dimensions.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use convseg_core::mask::{bilinear_resize, erode, fit_longest_side, resize_image_to, resize_mask_to};
use convseg_core::BinaryMask;
use image::RgbImage;
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{NetError, Result};

const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;

/// A normalized, padded image in channel-major layout.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub orig_h: usize,
    pub orig_w: usize,
    pub resized_h: usize,
    pub resized_w: usize,
    pub size: usize,
    /// `3 * size * size`, channel-major; padding is zero.
    pub pixels: Vec<f32>,
    /// Content hash used as the image-embedding cache key.
    pub key: [u8; 32],
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| NetError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn prepare_image(image: &RgbImage, size: usize) -> PreparedImage {
    let (w, h) = image.dimensions();
    let (orig_h, orig_w) = (h as usize, w as usize);
    let (rh, rw) = fit_longest_side(orig_h, orig_w, size);
    let resized = resize_image_to(image, rh, rw);
    let mut pixels = vec![0f32; 3 * size * size];
    for (x, y, p) in resized.enumerate_pixels() {
        for c in 0..3 {
            let v = (p.0[c] as f32 / 255.0 - PIXEL_MEAN) / PIXEL_STD;
            pixels[c * size * size + y as usize * size + x as usize] = v;
        }
    }
    let mut hasher = Sha256::new();
    hasher.update((w as u64).to_le_bytes());
    hasher.update((h as u64).to_le_bytes());
    hasher.update(image.as_raw());
    PreparedImage {
        orig_h,
        orig_w,
        resized_h: rh,
        resized_w: rw,
        size,
        pixels,
        key: hasher.finalize().into(),
    }
}

/// Flattens non-overlapping `stride`x`stride` patches into rows of
/// `3 * stride^2` values, row-major over the patch grid.
pub fn patchify(prepared: &PreparedImage, cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<Tensor> {
    let s = prepared.size;
    let p = cfg.patch_stride;
    let g = s / p;
    let mut rows = Vec::with_capacity(g * g * 3 * p * p);
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for dy in 0..p {
                    let base = c * s * s + (gy * p + dy) * s + gx * p;
                    rows.extend_from_slice(&prepared.pixels[base..base + p]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(rows, (g * g, 3 * p * p), device)?.to_dtype(dtype)?)
}

/// Training target in the model frame: resized (nearest), padded, then eroded.
pub fn prepare_target(mask: &BinaryMask, size: usize, erode_kernel: usize) -> Result<BinaryMask> {
    let (rh, rw) = fit_longest_side(mask.height(), mask.width(), size);
    let resized = resize_mask_to(mask, rh, rw);
    let padded = BinaryMask::from_fn(size, size, |y, x| y < rh && x < rw && resized.get(y, x));
    if erode_kernel <= 1 {
        return Ok(padded);
    }
    Ok(erode(&padded, erode_kernel, 1)?)
}

pub fn mask_to_tensor(mask: &BinaryMask, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f32> = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, (mask.height(), mask.width()), device)?.to_dtype(dtype)?)
}

/// Per-pixel foreground probabilities at the original image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ProbabilityMap {
    /// Foreground where the probability is at least `t`.
    pub fn threshold(&self, t: f32) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.values[y * self.width + x] >= t)
    }
}

/// Crops a `size`x`size` probability grid to the resized region and maps it
/// back to the original resolution bilinearly.
pub fn postprocess(square: &[f32], prepared: &PreparedImage) -> ProbabilityMap {
    let s = prepared.size;
    let mut crop = Vec::with_capacity(prepared.resized_h * prepared.resized_w);
    for y in 0..prepared.resized_h {
        crop.extend_from_slice(&square[y * s..y * s + prepared.resized_w]);
    }
    let values = bilinear_resize(
        &crop,
        prepared.resized_h,
        prepared.resized_w,
        1,
        prepared.orig_h,
        prepared.orig_w,
    );
    ProbabilityMap {
        height: prepared.orig_h,
        width: prepared.orig_w,
        values,
    }
}
