use super::{BinaryMask, MaskError};

/// Square-kernel binary erosion. Pixels outside the frame count as background,
/// so foreground touching the border shrinks too.
pub fn erode(mask: &BinaryMask, kernel_side: usize, iterations: usize) -> Result<BinaryMask, MaskError> {
    if kernel_side == 0 || kernel_side.is_multiple_of(2) {
        return Err(MaskError::EvenKernel(kernel_side));
    }
    let mut out = mask.clone();
    if kernel_side == 1 {
        return Ok(out);
    }
    for _ in 0..iterations {
        out = erode_once(&out, kernel_side / 2);
    }
    Ok(out)
}

// A square window is all-ones iff every row segment is, so erode rows then columns.
fn erode_once(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let rows = erode_lines(mask.bits(), h, radius, |line, i| line * w + i, w);
    let cols = erode_lines(&rows, w, radius, |line, i| i * w + line, h);
    BinaryMask::from_bits(h, w, cols)
}

fn erode_lines(
    src: &[bool],
    n_lines: usize,
    radius: usize,
    index: impl Fn(usize, usize) -> usize,
    len: usize,
) -> Vec<bool> {
    let mut out = vec![false; src.len()];
    let mut prefix = vec![0usize; len + 1];
    for line in 0..n_lines {
        for i in 0..len {
            prefix[i + 1] = prefix[i] + src[index(line, i)] as usize;
        }
        for i in radius..len.saturating_sub(radius) {
            let ones = prefix[i + radius + 1] - prefix[i - radius];
            out[index(line, i)] = ones == 2 * radius + 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct neighborhood scan, out-of-bounds treated as background.
    fn erode_oracle(m: &BinaryMask, k: usize) -> BinaryMask {
        let r = (k / 2) as i64;
        let (h, w) = m.dims();
        BinaryMask::from_fn(h, w, |y, x| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 || !m.get(yy as usize, xx as usize) {
                        return false;
                    }
                }
            }
            true
        })
    }

    #[test]
    fn kernel_one_is_identity() {
        let m = BinaryMask::from_fn(5, 6, |y, x| (y + x) % 3 == 0);
        assert_eq!(erode(&m, 1, 3).unwrap(), m);
    }

    #[test]
    fn seven_by_seven_ones_leaves_center_block() {
        let out = erode(&BinaryMask::ones(7, 7), 5, 1).unwrap();
        let expected = BinaryMask::from_fn(7, 7, |y, x| (2..5).contains(&y) && (2..5).contains(&x));
        assert_eq!(out, expected);
        assert_eq!(out.count(), 9);
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert_eq!(erode(&BinaryMask::ones(3, 3), 4, 1).unwrap_err(), MaskError::EvenKernel(4));
        assert_eq!(erode(&BinaryMask::ones(3, 3), 0, 1).unwrap_err(), MaskError::EvenKernel(0));
    }

    #[test]
    fn kernel_larger_than_mask_clears_it() {
        assert!(erode(&BinaryMask::ones(3, 3), 5, 1).unwrap().is_empty());
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (1usize..=24, 1usize..=24).prop_flat_map(|(h, w)| {
            proptest::collection::vec(prop::bool::weighted(0.8), h * w)
                .prop_map(move |bits| BinaryMask::from_bits(h, w, bits))
        })
    }

    proptest! {
        #[test]
        fn matches_oracle_and_shrinks(m in arb_mask(), k in prop::sample::select(vec![1usize, 3, 5, 7])) {
            let out = erode(&m, k, 1).unwrap();
            prop_assert_eq!(&out, &erode_oracle(&m, k));
            prop_assert!(out.is_subset_of(&m));
        }

        #[test]
        fn iterations_compose(m in arb_mask()) {
            let twice = erode(&m, 5, 2).unwrap();
            let nested = erode(&erode(&m, 5, 1).unwrap(), 5, 1).unwrap();
            prop_assert_eq!(twice, nested);
        }
    }
}
