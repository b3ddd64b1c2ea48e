//! Interior distance to the mask boundary and farthest-point clicks.
//!
//! For a mask pixel the distance is to the nearest pixel outside the mask,
//! with everything beyond the image border counting as outside; non-mask
//! pixels get 0. A 1x1 mask therefore has distance 1 at its only pixel.
//!
//! Two regimes, pinned by the tests: masks up to 64x64 get the exact
//! Euclidean transform (two-pass row/column decomposition over squared
//! distances, integer arithmetic); larger masks use the classic two-pass
//! 3-4 chamfer approximation scaled by 1/3.

use super::mask::MaskBitmap;
use crate::{Error, Result};

pub const EXACT_LIMIT: usize = 64;

/// Per-pixel distance map (f32), same layout as the mask.
pub fn boundary_distance(mask: &MaskBitmap) -> Result<Vec<f32>> {
    if mask.is_empty() {
        return Err(Error::Invalid("boundary_distance of an empty mask".into()));
    }
    if mask.width() <= EXACT_LIMIT && mask.height() <= EXACT_LIMIT {
        Ok(exact_sq(mask).iter().map(|&d| (d as f32).sqrt()).collect())
    } else {
        Ok(chamfer34(mask))
    }
}

/// Exact squared Euclidean distance to the complement (image border ring
/// included), computed by 1-D decomposition: first the vertical distance to
/// an outside pixel per column, then a scan over columns per row.
pub(crate) fn exact_sq(mask: &MaskBitmap) -> Vec<i64> {
    let (w, h) = (mask.width(), mask.height());
    // g[y][x]: vertical distance from (x,y) to the nearest outside cell in
    // column x (virtual outside rows at y = -1 and y = h).
    let mut g = vec![0i64; w * h];
    for x in 0..w {
        for y in 0..h {
            g[y * w + x] = if mask.get(x, y) {
                if y == 0 {
                    1
                } else {
                    g[(y - 1) * w + x] + 1
                }
            } else {
                0
            };
        }
        for y in (0..h).rev() {
            if mask.get(x, y) {
                let down = if y + 1 == h { 1 } else { g[(y + 1) * w + x] + 1 };
                if down < g[y * w + x] {
                    g[y * w + x] = down;
                }
            }
        }
    }
    // Combine columns: d2(x,y) = min over x' of g(x',y)^2 + (x-x')^2, with
    // virtual outside columns at x' = -1 and x' = w contributing 0 vertical
    // distance.
    let mut out = vec![0i64; w * h];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut best = i64::MAX;
            // virtual columns
            let left = (x as i64 + 1) * (x as i64 + 1);
            let right = (w as i64 - x as i64) * (w as i64 - x as i64);
            best = best.min(left).min(right);
            for xp in 0..w {
                let dx = x as i64 - xp as i64;
                let gv = g[y * w + xp];
                let cand = gv * gv + dx * dx;
                if cand < best {
                    best = cand;
                }
            }
            out[y * w + x] = best;
        }
    }
    out
}

/// Two-pass 3-4 chamfer distance scaled by 1/3, border treated as outside.
fn chamfer34(mask: &MaskBitmap) -> Vec<f32> {
    let (w, h) = (mask.width(), mask.height());
    let big = (3 * (w + h)) as i64 + 7;
    let mut d = vec![0i64; w * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                d[y * w + x] = big;
            }
        }
    }
    let at = |d: &Vec<i64>, x: i64, y: i64| -> i64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0
        } else {
            d[y as usize * w + x as usize]
        }
    };
    // forward pass
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !mask.get(x as usize, y as usize) {
                continue;
            }
            let mut best = d[y as usize * w + x as usize];
            best = best.min(at(&d, x - 1, y) + 3);
            best = best.min(at(&d, x, y - 1) + 3);
            best = best.min(at(&d, x - 1, y - 1) + 4);
            best = best.min(at(&d, x + 1, y - 1) + 4);
            d[y as usize * w + x as usize] = best;
        }
    }
    // backward pass
    for y in (0..h as i64).rev() {
        for x in (0..w as i64).rev() {
            if !mask.get(x as usize, y as usize) {
                continue;
            }
            let mut best = d[y as usize * w + x as usize];
            best = best.min(at(&d, x + 1, y) + 3);
            best = best.min(at(&d, x, y + 1) + 3);
            best = best.min(at(&d, x + 1, y + 1) + 4);
            best = best.min(at(&d, x - 1, y + 1) + 4);
            d[y as usize * w + x as usize] = best;
        }
    }
    d.iter().map(|&v| v as f32 / 3.0).collect()
}

/// Argmax of a distance map restricted to mask pixels, ties broken by
/// (row, col) lexicographic order. Comparisons happen on the exact integer
/// quantities underlying each regime, so tie-breaking is never subject to
/// float rounding.
pub(crate) fn argmax_in_mask(dist: &[f32], mask: &MaskBitmap) -> (usize, usize) {
    let (w, h) = (mask.width(), mask.height());
    let mut best = f32::NEG_INFINITY;
    let mut best_xy = (0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) && dist[y * w + x] > best {
                best = dist[y * w + x];
                best_xy = (x, y);
            }
        }
    }
    best_xy
}
