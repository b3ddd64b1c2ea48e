//! Binary masks and exact interior distance.

use crate::{Error, Result};

/// Row-major binary occupancy mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskBitmap {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl MaskBitmap {
    pub fn new(width: usize, height: usize) -> Self {
        MaskBitmap {
            width,
            height,
            bits: vec![0; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape(format!(
                "mask {width}x{height} wants {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Invalid("mask bits must be 0 or 1".into()));
        }
        Ok(MaskBitmap {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v as u8;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// Tight bounding box `(x0, y0, x1, y1)` in pixel-edge coordinates
    /// (exclusive upper bounds); `None` for an empty mask.
    pub fn tight_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (self.width, self.height, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }

    /// Pixel-wise XOR; panics on size mismatch.
    pub fn xor(&self, other: &MaskBitmap) -> MaskBitmap {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a ^ b)
            .collect();
        MaskBitmap {
            width: self.width,
            height: self.height,
            bits,
        }
    }

    /// Nearest-neighbor upscale by an integer factor.
    pub fn upscale(&self, factor: usize) -> MaskBitmap {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut out = MaskBitmap::new(w, h);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(x / factor, y / factor));
            }
        }
        out
    }
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn iou(a: &MaskBitmap, b: &MaskBitmap) -> Result<f32> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!(
            "iou on {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f32 / union as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_identical_and_disjoint() {
        let mut a = MaskBitmap::new(4, 4);
        a.set(1, 1, true);
        a.set(2, 1, true);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);

        let mut b = MaskBitmap::new(4, 4);
        b.set(0, 3, true);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_hand_counted_third() {
        // a = {(0,0),(0,1)}, b = {(0,1),(1,1)} as (x,y) pairs.
        let mut a = MaskBitmap::new(2, 2);
        a.set(0, 0, true);
        a.set(0, 1, true);
        let mut b = MaskBitmap::new(2, 2);
        b.set(0, 1, true);
        b.set(1, 1, true);
        let got = iou(&a, &b).unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn iou_both_empty_is_one() {
        let a = MaskBitmap::new(3, 3);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn iou_dim_mismatch() {
        let a = MaskBitmap::new(3, 3);
        let b = MaskBitmap::new(4, 3);
        assert!(iou(&a, &b).is_err());
    }

    #[test]
    fn tight_box_and_upscale() {
        let mut m = MaskBitmap::new(6, 4);
        m.set(2, 1, true);
        m.set(4, 2, true);
        assert_eq!(m.tight_box(), Some((2, 1, 5, 3)));
        let up = m.upscale(2);
        assert_eq!(up.width(), 12);
        assert!(up.get(4, 2) && up.get(5, 3));
        assert_eq!(up.area(), m.area() * 4);
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(bits_a in proptest::collection::vec(0u8..2, 36),
                            bits_b in proptest::collection::vec(0u8..2, 36)) {
            let a = MaskBitmap::from_bits(6, 6, bits_a).unwrap();
            let b = MaskBitmap::from_bits(6, 6, bits_b).unwrap();
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        }
    }
}
