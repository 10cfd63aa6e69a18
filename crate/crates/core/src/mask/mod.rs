//! Binary masks and the geometry around them.
//!
//! Masks are stored row-major as one `bool` per pixel. The serialized form is
//! COCO-style uncompressed run-length encoding ([`MaskRle`]), which flattens in
//! column-major order and always starts with a background run.

mod morph;
mod overlay;
mod resize;
mod rle;

pub use morph::erode;
pub use overlay::{palette_color, render_marks_overlay, PALETTE};
pub use resize::{
    bilinear_resize, fit_longest_side, resize_image_longest_side, resize_image_to,
    resize_mask_longest_side, resize_mask_to,
};
pub use rle::{rle_decode, rle_encode, MaskRle};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("dimension mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    DimensionMismatch {
        left_h: usize,
        left_w: usize,
        right_h: usize,
        right_w: usize,
    },
    #[error("rle counts sum to {sum}, expected {expected}")]
    CountsMismatch { sum: u64, expected: u64 },
    #[error("kernel side must be odd and at least 1, got {0}")]
    EvenKernel(usize),
    #[error("duplicate region index {0}")]
    DuplicateIndex(u32),
    #[error("invalid box {0:?}")]
    InvalidBox(BoundingBox),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    /// Builds a mask from row-major bits. Panics if the length does not match.
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "bit length must equal height*width");
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    /// A mask whose foreground is exactly the (half-open) box.
    pub fn from_box(height: usize, width: usize, b: &BoundingBox) -> Self {
        BinaryMask::from_fn(height, width, |y, x| {
            x >= b.x_min as usize && x < b.x_max as usize && y >= b.y_min as usize && y < b.y_max as usize
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.dims() != other.dims() {
            return Err(MaskError::DimensionMismatch {
                left_h: self.height,
                left_w: self.width,
                right_h: other.height,
                right_w: other.width,
            });
        }
        Ok(())
    }

    /// Returns `(|a ∩ b|, |a ∪ b|)`.
    pub fn intersection_union(&self, other: &BinaryMask) -> Result<(u64, u64), MaskError> {
        self.check_dims(other)?;
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as u64;
            union += (a || b) as u64;
        }
        Ok((inter, union))
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.check_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        Ok(BinaryMask::from_bits(self.height, self.width, bits))
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Tight bounding box of the foreground, or `None` for an empty mask.
    pub fn bbox(&self) -> Option<BoundingBox> {
        let mut out: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    let (x0, y0, x1, y1) = out.unwrap_or((x as u32, y as u32, x as u32 + 1, y as u32 + 1));
                    out = Some((
                        x0.min(x as u32),
                        y0.min(y as u32),
                        x1.max(x as u32 + 1),
                        y1.max(y as u32 + 1),
                    ));
                }
            }
        }
        out.map(|(x_min, y_min, x_max, y_max)| BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Foreground centroid `(y, x)` in pixel-center coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sy += y as f64 + 0.5;
                    sx += x as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }
}

/// Intersection over union. Two empty masks are a perfect match (1.0).
pub fn binary_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    let (inter, union) = a.intersection_union(b)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Axis-aligned box in pixel coordinates, half-open on the max edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid_for(&self, width: u32, height: u32) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max && self.x_max <= width && self.y_max <= height
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    /// Clamps real-valued corners into a `width`x`height` frame. Returns the box
    /// and whether any coordinate had to move; `None` if nothing is left.
    pub fn clamp_from_f64(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        width: u32,
        height: u32,
    ) -> Option<(BoundingBox, bool)> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return None;
        }
        let cx = |v: f64| v.round().clamp(0.0, width as f64) as u32;
        let cy = |v: f64| v.round().clamp(0.0, height as f64) as u32;
        let b = BoundingBox::new(cx(x_min), cy(y_min), cx(x_max), cy(y_max));
        let moved = x_min < 0.0 || y_min < 0.0 || x_max > width as f64 || y_max > height as f64;
        b.is_valid_for(width, height).then_some((b, moved))
    }

    /// Grows the box by `fraction` of its size on every side, clipped to the frame.
    pub fn dilate(&self, fraction: f64, width: u32, height: u32) -> BoundingBox {
        let dx = (self.width() as f64 * fraction).round() as i64;
        let dy = (self.height() as f64 * fraction).round() as i64;
        BoundingBox {
            x_min: (self.x_min as i64 - dx).max(0) as u32,
            y_min: (self.y_min as i64 - dy).max(0) as u32,
            x_max: (self.x_max as i64 + dx).min(width as i64) as u32,
            y_max: (self.y_max as i64 + dy).min(height as i64) as u32,
        }
    }

    /// `side`x`side` cell-center points covering the box, as `(x, y)` pixels.
    pub fn grid_points(&self, side: usize) -> Vec<(u32, u32)> {
        let mut pts = Vec::with_capacity(side * side);
        let mut seen = std::collections::HashSet::new();
        let (w, h) = (self.width() as f64, self.height() as f64);
        for j in 0..side {
            for i in 0..side {
                let x = self.x_min as f64 + (i as f64 + 0.5) * w / side as f64;
                let y = self.y_min as f64 + (j as f64 + 0.5) * h / side as f64;
                let p = ((x.floor() as u32).min(self.x_max - 1), (y.floor() as u32).min(self.y_max - 1));
                if seen.insert(p) {
                    pts.push(p);
                }
            }
        }
        pts
    }
}
