//! Synthetic scene generation: colored ellipses, rectangles and triangles
//! with random pose over a textured background, occlusion resolved by paint
//! order. Deterministic per seed through the counter-based generator.

use crate::eval::MaskBitmap;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "ellipse" => Ok(ShapeKind::Ellipse),
            "rectangle" => Ok(ShapeKind::Rectangle),
            "triangle" => Ok(ShapeKind::Triangle),
            other => Err(Error::Invalid(format!("unknown shape kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub mask: MaskBitmap,
    /// Tight bounding box in pixel-edge coordinates `(x0, y0, x1, y1)`.
    pub bbox: (usize, usize, usize, usize),
    pub kind: ShapeKind,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// `[3, S, S]` image with values in `[0, 1]`.
    pub image: Tensor,
    pub instances: Vec<Instance>,
}

struct Shape {
    kind: ShapeKind,
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
    rot: f32,
    color: [f32; 3],
}

impl Shape {
    fn contains(&self, px: f32, py: f32) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (cosr, sinr) = (self.rot.cos(), self.rot.sin());
        let u = dx * cosr + dy * sinr;
        let v = -dx * sinr + dy * cosr;
        match self.kind {
            ShapeKind::Ellipse => {
                (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b) <= 1.0
            }
            ShapeKind::Rectangle => u.abs() <= self.a && v.abs() <= self.b,
            ShapeKind::Triangle => {
                // Isoceles triangle: apex up at (0, -b), base at v = +b.
                let verts = [(0.0f32, -self.b), (-self.a, self.b), (self.a, self.b)];
                let mut sign = 0i8;
                for i in 0..3 {
                    let (x1, y1) = verts[i];
                    let (x2, y2) = verts[(i + 1) % 3];
                    let cross = (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1);
                    let s = if cross > 0.0 {
                        1i8
                    } else if cross < 0.0 {
                        -1
                    } else {
                        0
                    };
                    if s != 0 {
                        if sign == 0 {
                            sign = s;
                        } else if sign != s {
                            return false;
                        }
                    }
                }
                true
            }
        }
    }
}

/// Generate `n_images` scenes of side `size` with 1..=`max_instances` shapes
/// each. Later shapes overwrite earlier ones; instances whose visible mask
/// ends up empty are dropped, and boxes are recomputed from the final masks.
pub fn gen_dataset(
    seed: u64,
    n_images: usize,
    size: usize,
    max_instances: usize,
) -> Result<Vec<SyntheticScene>> {
    if size % 32 != 0 {
        return Err(Error::Invalid(format!("scene size {size} not divisible by 32")));
    }
    if max_instances == 0 {
        return Err(Error::Invalid("max_instances must be >= 1".into()));
    }
    let master = Rng::new(seed);
    let mut scenes = Vec::with_capacity(n_images);
    for img_idx in 0..n_images {
        let mut rng = master.fork(0x5ce0 + img_idx as u64);
        let s = size as f32;
        // Textured background: two-corner gradient plus seeded value noise.
        let c0: Vec<f32> = (0..3).map(|_| 0.1 + 0.3 * rng.next_f32()).collect();
        let gx: Vec<f32> = (0..3).map(|_| 0.25 * (rng.next_f32() - 0.5)).collect();
        let gy: Vec<f32> = (0..3).map(|_| 0.25 * (rng.next_f32() - 0.5)).collect();
        let noise_seed = rng.next_u64();
        let mut image = Tensor::zeros(&[3, size, size]);
        {
            let data = image.data_mut();
            let mut noise = Rng::new(noise_seed);
            for y in 0..size {
                for x in 0..size {
                    let n = 0.04 * (noise.next_f32() - 0.5);
                    for c in 0..3 {
                        data[(c * size + y) * size + x] = (c0[c]
                            + gx[c] * x as f32 / s
                            + gy[c] * y as f32 / s
                            + n)
                            .clamp(0.0, 1.0);
                    }
                }
            }
        }
        let count = rng.next_range(1, max_instances);
        let mut masks: Vec<(MaskBitmap, ShapeKind)> = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = match rng.next_below(3) {
                0 => ShapeKind::Ellipse,
                1 => ShapeKind::Rectangle,
                _ => ShapeKind::Triangle,
            };
            let shape = Shape {
                kind,
                cx: s * (0.25 + 0.5 * rng.next_f32()),
                cy: s * (0.25 + 0.5 * rng.next_f32()),
                a: s * (0.12 + 0.18 * rng.next_f32()),
                b: s * (0.12 + 0.18 * rng.next_f32()),
                rot: std::f32::consts::PI * rng.next_f32(),
                color: [
                    0.35 + 0.6 * rng.next_f32(),
                    0.35 + 0.6 * rng.next_f32(),
                    0.35 + 0.6 * rng.next_f32(),
                ],
            };
            let mut mask = MaskBitmap::new(size, size);
            let data = image.data_mut();
            for y in 0..size {
                for x in 0..size {
                    if shape.contains(x as f32 + 0.5, y as f32 + 0.5) {
                        mask.set(x, y, true);
                        for c in 0..3 {
                            data[(c * size + y) * size + x] = shape.color[c];
                        }
                        // Later shapes occlude earlier instances.
                        for (earlier, _) in masks.iter_mut() {
                            earlier.set(x, y, false);
                        }
                    }
                }
            }
            masks.push((mask, kind));
        }
        let instances = masks
            .into_iter()
            .filter(|(m, _)| !m.is_empty())
            .map(|(mask, kind)| {
                let bbox = mask.tight_box().expect("nonempty mask");
                Instance { mask, bbox, kind }
            })
            .collect();
        scenes.push(SyntheticScene { image, instances });
    }
    Ok(scenes)
}
