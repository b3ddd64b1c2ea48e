//! Image/mask preprocessing: aspect-preserving resize of the longest side,
//! zero padding of the shorter side to a square, and horizontal flip applied
//! identically to images, masks, boxes and points.

use crate::eval::MaskBitmap;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Geometry of one preprocessing application, used to map annotations.
#[derive(Clone, Copy, Debug)]
pub struct Transform {
    pub scale: f32,
    /// Content size after resizing, before padding.
    pub resized_w: usize,
    pub resized_h: usize,
    pub out_size: usize,
    pub flipped: bool,
}

impl Transform {
    pub fn new(w: usize, h: usize, out_size: usize, flipped: bool) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::Invalid("empty image".into()));
        }
        let scale = out_size as f32 / w.max(h) as f32;
        let resized_w = ((w as f32 * scale).round() as usize).clamp(1, out_size);
        let resized_h = ((h as f32 * scale).round() as usize).clamp(1, out_size);
        Ok(Transform {
            scale,
            resized_w,
            resized_h,
            out_size,
            flipped,
        })
    }

    /// Map a pixel-center point from source to output space.
    pub fn apply_point(&self, x: f32, y: f32) -> (f32, f32) {
        let mut xs = x * self.scale;
        let ys = y * self.scale;
        if self.flipped {
            xs = self.resized_w as f32 - xs;
        }
        (xs, ys)
    }

    /// Map an edge-coordinate box; a flip swaps the horizontal edges.
    pub fn apply_box(&self, b: (f32, f32, f32, f32)) -> (f32, f32, f32, f32) {
        let (x0, y0, x1, y1) = b;
        let (mut nx0, mut nx1) = (x0 * self.scale, x1 * self.scale);
        let (ny0, ny1) = (y0 * self.scale, y1 * self.scale);
        if self.flipped {
            let w = self.resized_w as f32;
            (nx0, nx1) = (w - nx1, w - nx0);
        }
        (nx0, ny0, nx1, ny1)
    }
}

/// Resize (bilinear), optionally flip, and pad an image to
/// `[3, out, out]`; masks follow with nearest-neighbor sampling.
pub fn preprocess(
    image: &Tensor,
    masks: &[MaskBitmap],
    out_size: usize,
    flipped: bool,
) -> Result<(Tensor, Vec<MaskBitmap>, Transform)> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("preprocess wants [3, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let t = Transform::new(w, h, out_size, flipped)?;
    let mut out = Tensor::zeros(&[3, out_size, out_size]);
    let (rw, rh) = (t.resized_w, t.resized_h);
    for c in 0..3 {
        for oy in 0..rh {
            let sy = ((oy as f32 + 0.5) / t.scale - 0.5).clamp(0.0, (h - 1) as f32);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f32;
            for ox in 0..rw {
                let content_x = if flipped { rw - 1 - ox } else { ox };
                let sx = ((content_x as f32 + 0.5) / t.scale - 0.5).clamp(0.0, (w - 1) as f32);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f32;
                let at = |yy: usize, xx: usize| image.data()[(c * h + yy) * w + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.data_mut()[(c * out_size + oy) * out_size + ox] =
                    top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let mut out_masks = Vec::with_capacity(masks.len());
    for m in masks {
        if (m.width(), m.height()) != (w, h) {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match image {w}x{h}",
                m.width(),
                m.height()
            )));
        }
        let mut om = MaskBitmap::new(out_size, out_size);
        for oy in 0..rh {
            let sy = (((oy as f32 + 0.5) / t.scale) as usize).min(h - 1);
            for ox in 0..rw {
                let content_x = if flipped { rw - 1 - ox } else { ox };
                let sx = (((content_x as f32 + 0.5) / t.scale) as usize).min(w - 1);
                om.set(ox, oy, m.get(sx, sy));
            }
        }
        out_masks.push(om);
    }
    Ok((out, out_masks, t))
}
