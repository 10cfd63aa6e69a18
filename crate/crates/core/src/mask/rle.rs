use serde::{Deserialize, Serialize};

use super::{BinaryMask, MaskError};

/// Uncompressed COCO run-length encoding.
///
/// `counts` alternate background/foreground runs over the column-major
/// flattening, starting with a (possibly zero-length) background run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskRle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl MaskRle {
    /// The encoding of an all-background mask.
    pub fn empty(height: usize, width: usize) -> Self {
        let counts = if height * width == 0 { vec![] } else { vec![(height * width) as u64] };
        MaskRle {
            size: [height, width],
            counts,
        }
    }

    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    /// Number of foreground pixels, read straight off the odd runs.
    pub fn foreground_count(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }
}

pub fn rle_encode(mask: &BinaryMask) -> MaskRle {
    let (h, w) = mask.dims();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(y, x);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    if h * w > 0 {
        counts.push(run);
    }
    MaskRle { size: [h, w], counts }
}

pub fn rle_decode(rle: &MaskRle) -> Result<BinaryMask, MaskError> {
    let [h, w] = rle.size;
    let expected = (h * w) as u64;
    let sum: u64 = rle.counts.iter().sum();
    if sum != expected {
        return Err(MaskError::CountsMismatch { sum, expected });
    }
    let mut mask = BinaryMask::zeros(h, w);
    let mut pos = 0usize;
    let mut value = false;
    for &c in &rle.counts {
        if value {
            for p in pos..pos + c as usize {
                // column-major position p -> (row p % h, col p / h)
                mask.set(p % h, p / h, true);
            }
        }
        pos += c as usize;
        value = !value;
    }
    Ok(mask)
}
