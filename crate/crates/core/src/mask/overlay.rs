use std::collections::HashSet;

use image::{Rgb, RgbImage};

use super::{BinaryMask, MaskError};

/// Ten high-contrast colors, cycled by region index.
pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

const LABEL_BACKGROUND: [u8; 3] = [0, 0, 0];

pub fn palette_color(index: u32) -> [u8; 3] {
    PALETTE[index as usize % PALETTE.len()]
}

// 5x7 digit glyphs, one byte per row, bit 4 is the leftmost column.
const DIGITS: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

/// Draws each region's outline in its palette color and its index at the
/// foreground centroid. The input image is left untouched.
pub fn render_marks_overlay(image: &RgbImage, regions: &[(u32, BinaryMask)]) -> Result<RgbImage, MaskError> {
    let (w, h) = image.dimensions();
    let mut seen = HashSet::new();
    for (index, mask) in regions {
        if mask.dims() != (h as usize, w as usize) {
            return Err(MaskError::DimensionMismatch {
                left_h: h as usize,
                left_w: w as usize,
                right_h: mask.height(),
                right_w: mask.width(),
            });
        }
        if !seen.insert(*index) {
            return Err(MaskError::DuplicateIndex(*index));
        }
    }

    let mut out = image.clone();
    for (index, mask) in regions {
        let color = Rgb(palette_color(*index));
        for y in 0..h as usize {
            for x in 0..w as usize {
                if is_boundary(mask, y, x) {
                    out.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    // labels go on top of every outline
    let scale = ((h as f64 * 0.02) / 7.0).round().max(1.0) as u32;
    for (index, mask) in regions {
        if let Some((cy, cx)) = mask.centroid() {
            draw_label(&mut out, &index.to_string(), cy, cx, scale, palette_color(*index));
        }
    }
    Ok(out)
}

fn is_boundary(mask: &BinaryMask, y: usize, x: usize) -> bool {
    if !mask.get(y, x) {
        return false;
    }
    let (h, w) = mask.dims();
    y == 0 || x == 0 || y + 1 == h || x + 1 == w || !mask.get(y - 1, x) || !mask.get(y + 1, x) || !mask.get(y, x - 1) || !mask.get(y, x + 1)
}

fn draw_label(img: &mut RgbImage, text: &str, cy: f64, cx: f64, scale: u32, color: [u8; 3]) {
    let (w, h) = img.dimensions();
    let glyph_w = 5 * scale;
    let glyph_h = 7 * scale;
    let gap = scale;
    let n = text.chars().count() as u32;
    let text_w = n * glyph_w + n.saturating_sub(1) * gap;
    // one-scale-unit dark margin around the digits
    let left = (cx - text_w as f64 / 2.0).round() as i64;
    let top = (cy - glyph_h as f64 / 2.0).round() as i64;
    let mut put = |x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    };
    let m = scale as i64;
    for y in (top - m)..(top + glyph_h as i64 + m) {
        for x in (left - m)..(left + text_w as i64 + m) {
            put(x, y, LABEL_BACKGROUND);
        }
    }
    for (i, ch) in text.chars().enumerate() {
        let Some(d) = ch.to_digit(10) else { continue };
        let ox = left + (i as u32 * (glyph_w + gap)) as i64;
        for (row, bits) in DIGITS[d as usize].iter().enumerate() {
            for col in 0..5u32 {
                if bits & (0x10 >> col) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            put(
                                ox + (col * scale + sx) as i64,
                                top + (row as u32 * scale + sy) as i64,
                                color,
                            );
                        }
                    }
                }
            }
        }
    }
}
