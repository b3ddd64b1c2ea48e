//! Uncompressed run-length mask codec, COCO-compatible: column-major scan,
//! counts alternating runs of 0s and 1s starting with zeros (a leading zero
//! count of 0 marks a mask whose first column-major bit is set).

use crate::eval::MaskBitmap;
use crate::{Error, Result};

pub fn rle_encode(mask: &MaskBitmap) -> Vec<usize> {
    let (w, h) = (mask.width(), mask.height());
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0usize;
    for x in 0..w {
        for y in 0..h {
            let bit = mask.get(x, y) as u8;
            if bit == current {
                run += 1;
            } else {
                counts.push(run);
                current = bit;
                run = 1;
            }
        }
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[usize], w: usize, h: usize) -> Result<MaskBitmap> {
    let total: usize = counts.iter().sum();
    if total != w * h {
        return Err(Error::Invalid(format!(
            "rle counts sum to {total}, mask is {w}x{h} = {}",
            w * h
        )));
    }
    let mut mask = MaskBitmap::new(w, h);
    let mut pos = 0usize;
    for (i, &run) in counts.iter().enumerate() {
        let bit = i % 2 == 1;
        if bit {
            for p in pos..pos + run {
                mask.set(p / h, p % h, true);
            }
        }
        pos += run;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn all_zeros_is_single_count() {
        let m = MaskBitmap::new(2, 2);
        assert_eq!(rle_encode(&m), vec![4]);
    }

    #[test]
    fn alternating_column_major_bits() {
        // column-major bits [0,1,0,1]: (x0,y0)=0, (x0,y1)=1, (x1,y0)=0, (x1,y1)=1
        let mut m = MaskBitmap::new(2, 2);
        m.set(0, 1, true);
        m.set(1, 1, true);
        assert_eq!(rle_encode(&m), vec![1, 1, 1, 1]);
    }

    #[test]
    fn leading_one_gets_zero_prefix() {
        let mut m = MaskBitmap::new(2, 1);
        m.set(0, 0, true);
        assert_eq!(rle_encode(&m), vec![0, 1, 1]);
    }

    #[test]
    fn sum_mismatch_is_an_error() {
        assert!(rle_decode(&[3], 2, 2).is_err());
    }

    #[test]
    fn five_hundred_random_masks_round_trip() {
        let mut rng = Rng::new(404);
        for _ in 0..500 {
            let w = 1 + rng.next_below(24);
            let h = 1 + rng.next_below(24);
            let bits: Vec<u8> = (0..w * h).map(|_| (rng.next_f32() < 0.4) as u8).collect();
            let m = MaskBitmap::from_bits(w, h, bits).unwrap();
            let counts = rle_encode(&m);
            assert_eq!(rle_decode(&counts, w, h).unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn decode_encode_identity(bits in proptest::collection::vec(0u8..2, 48)) {
            let m = MaskBitmap::from_bits(8, 6, bits).unwrap();
            let counts = rle_encode(&m);
            prop_assert!(counts[1..].iter().all(|&c| c > 0), "only the first count may be zero");
            prop_assert_eq!(rle_decode(&counts, 8, 6).unwrap(), m);
        }
    }
}
