use image::RgbImage;

use super::BinaryMask;

/// Output `(height, width)` when scaling so the longer side equals `target`.
/// The short side is rounded half up and never drops below one pixel.
pub fn fit_longest_side(height: usize, width: usize, target: usize) -> (usize, usize) {
    let long = height.max(width);
    let short = height.min(width);
    // round(short * target / long) with ties going up, in integers
    let scaled = ((2 * short * target + long) / (2 * long)).max(1);
    if height >= width {
        (target, scaled)
    } else {
        (scaled, target)
    }
}

fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

/// Nearest-neighbour resize with pixel-center alignment.
pub fn resize_mask_to(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    if mask.dims() == (height, width) {
        return mask.clone();
    }
    let (sh, sw) = mask.dims();
    let cols: Vec<usize> = (0..width).map(|x| nearest_index(x, width, sw)).collect();
    BinaryMask::from_fn(height, width, |y, x| mask.get(nearest_index(y, height, sh), cols[x]))
}

pub fn resize_mask_longest_side(mask: &BinaryMask, target: usize) -> BinaryMask {
    let (h, w) = fit_longest_side(mask.height(), mask.width(), target);
    resize_mask_to(mask, h, w)
}

/// Bilinear resize of an interleaved `height`x`width`x`channels` grid, using
/// half-pixel centers and edge clamping.
pub fn bilinear_resize(
    data: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    assert_eq!(data.len(), height * width * channels);
    if (height, width) == (out_h, out_w) {
        return data.to_vec();
    }
    let taps = |dst_len: usize, src_len: usize| -> Vec<(usize, usize, f32)> {
        (0..dst_len)
            .map(|d| {
                let s = ((d as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(src_len - 1);
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, (s - i0 as f64).min(1.0) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, height);
    let xs = taps(out_w, width);
    let mut out = vec![0f32; out_h * out_w * channels];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..channels {
                let at = |y: usize, x: usize| data[(y * width + x) * channels + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * out_w + ox) * channels + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn resize_image_to(image: &RgbImage, height: usize, width: usize) -> RgbImage {
    let (w, h) = image.dimensions();
    if (h as usize, w as usize) == (height, width) {
        return image.clone();
    }
    let src: Vec<f32> = image.as_raw().iter().map(|&v| v as f32).collect();
    let dst = bilinear_resize(&src, h as usize, w as usize, 3, height, width);
    let raw = dst.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(width as u32, height as u32, raw).expect("buffer length matches dimensions")
}

pub fn resize_image_longest_side(image: &RgbImage, target: usize) -> RgbImage {
    let (w, h) = image.dimensions();
    let (nh, nw) = fit_longest_side(h as usize, w as usize, target);
    resize_image_to(image, nh, nw)
}
