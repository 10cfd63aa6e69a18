//! Images shown to verifiers.

use convseg_core::{BinaryMask, BoundingBox, MaskError};
use image::{Rgb, RgbImage};

const TINT: [u8; 3] = [255, 0, 255];
const BOX: [u8; 3] = [255, 255, 0];

/// The image with `mask` tinted half-way toward magenta and `bbox`, if given,
/// outlined in yellow.
pub fn highlight(image: &RgbImage, mask: &BinaryMask, bbox: Option<&BoundingBox>) -> Result<RgbImage, MaskError> {
    let (w, h) = image.dimensions();
    if mask.dims() != (h as usize, w as usize) {
        return Err(MaskError::DimensionMismatch {
            left_h: h as usize,
            left_w: w as usize,
            right_h: mask.height(),
            right_w: mask.width(),
        });
    }
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(y as usize, x as usize) {
            for (v, t) in px.0.iter_mut().zip(TINT) {
                *v = ((*v as u16 + t as u16) / 2) as u8;
            }
        }
    }
    if let Some(b) = bbox.filter(|b| b.is_valid_for(w, h)) {
        for x in b.x_min..b.x_max {
            out.put_pixel(x, b.y_min, Rgb(BOX));
            out.put_pixel(x, b.y_max - 1, Rgb(BOX));
        }
        for y in b.y_min..b.y_max {
            out.put_pixel(b.x_min, y, Rgb(BOX));
            out.put_pixel(b.x_max - 1, y, Rgb(BOX));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tints_only_the_mask_and_outlines_the_box() {
        let img = RgbImage::from_pixel(8, 6, Rgb([0, 0, 0]));
        let mask = BinaryMask::from_fn(6, 8, |y, x| y == 2 && x == 3);
        let b = BoundingBox::new(1, 1, 6, 5);
        let out = highlight(&img, &mask, Some(&b)).unwrap();
        assert_eq!(out.get_pixel(3, 2).0, [127, 0, 127]);
        assert_eq!(out.get_pixel(1, 3).0, BOX);
        assert_eq!(out.get_pixel(5, 4).0, BOX);
        assert_eq!(out.get_pixel(7, 0).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(3, 2).0, [0, 0, 0]);
        assert!(highlight(&img, &BinaryMask::zeros(3, 3), None).is_err());
    }
}
