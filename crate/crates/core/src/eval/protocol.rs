//! Click simulation: farthest-from-boundary initial click, error-region
//! refinement clicks, and the point/box evaluation loops.

use super::distance::{argmax_in_mask, boundary_distance};
use super::mask::{iou, MaskBitmap};
use crate::samhead::{PointLabel, PromptSet};
use crate::{Error, Result};

/// A simulated click in input-space pixel-center coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Click {
    pub x: usize,
    pub y: usize,
    pub label: PointLabel,
}

/// State of one interactive-refinement episode.
pub struct ClickState {
    pub clicks: Vec<Click>,
    pub prediction: MaskBitmap,
    pub gt: MaskBitmap,
}

/// First click: the ground-truth pixel farthest from the mask boundary.
pub fn initial_click(gt: &MaskBitmap) -> Result<Click> {
    let dist = boundary_distance(gt)?;
    let (x, y) = argmax_in_mask(&dist, gt);
    Ok(Click {
        x,
        y,
        label: PointLabel::Foreground,
    })
}

/// Largest 4-connected component of a nonempty mask, ties resolved toward
/// the component containing the first set pixel in row-major order.
fn largest_component(mask: &MaskBitmap) -> MaskBitmap {
    let (w, h) = (mask.width(), mask.height());
    let mut label = vec![usize::MAX; w * h];
    let mut sizes: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if mask.bits()[start] == 0 || label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0usize;
        stack.push(start);
        label[start] = id;
        while let Some(p) = stack.pop() {
            size += 1;
            let (x, y) = (p % w, p / w);
            let mut push = |q: usize| {
                if mask.bits()[q] != 0 && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        sizes.push(size);
    }
    let best = (0..sizes.len())
        .max_by_key(|&i| (sizes[i], usize::MAX - i))
        .expect("nonempty mask has a component");
    let bits = label.iter().map(|&l| (l == best) as u8).collect();
    MaskBitmap::from_bits(w, h, bits).expect("component bits are valid")
}

/// Next refinement click, or `None` when the prediction already matches the
/// ground truth (the caller stops early and reuses the last IoU). The click
/// is the farthest-from-boundary point of the largest connected component
/// of the error region `gt XOR prediction`; it is labeled foreground on
/// false negatives and background on false positives.
pub fn next_click(state: &ClickState) -> Result<Option<Click>> {
    let (w, h) = (state.gt.width(), state.gt.height());
    if (state.prediction.width(), state.prediction.height()) != (w, h) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs gt {w}x{h}",
            state.prediction.width(),
            state.prediction.height()
        )));
    }
    let error = state.gt.xor(&state.prediction);
    if error.is_empty() {
        return Ok(None);
    }
    let component = largest_component(&error);
    let dist = boundary_distance(&component)?;
    let (x, y) = argmax_in_mask(&dist, &component);
    let label = if state.gt.get(x, y) {
        PointLabel::Foreground
    } else {
        PointLabel::Background
    };
    Ok(Some(Click { x, y, label }))
}

/// Anything that can embed an image once and decode prompt sets against the
/// cached embedding. Implemented by the real model and by test oracles.
pub trait Segmenter {
    type Embedding;
    fn embed(&self, image: &crate::tensor::Tensor) -> Result<Self::Embedding>;
    fn predict(&self, embedding: &Self::Embedding, prompts: &PromptSet) -> Result<MaskBitmap>;
    /// Side length of the model input space (clicks live in this space).
    fn input_size(&self) -> usize;
}

/// Per-mask result of a click episode: IoU after clicks 1, 3 and 5.
#[derive(Clone, Copy, Debug)]
pub struct ClickRecord {
    pub iou_at: [f32; 3],
    pub clicks_used: usize,
}

pub const CLICK_BUDGETS: [usize; 3] = [1, 3, 5];

/// Run one click episode: initial click, predict, then alternate
/// next-click / predict up to `max_clicks` total clicks, recording the IoU
/// after clicks 1, 3 and 5. The model receives all accumulated clicks each
/// round; between rounds only points are fed back, never mask logits.
pub fn click_episode<S: Segmenter>(
    model: &S,
    embedding: &S::Embedding,
    gt: &MaskBitmap,
    max_clicks: usize,
) -> Result<ClickRecord> {
    let mut clicks = vec![initial_click(gt)?];
    let mut record = [0.0f32; 3];
    let mut last_iou;
    let mut prediction = model.predict(embedding, &prompts_from(&clicks))?;
    last_iou = iou(&prediction, gt)?;
    store_at(&mut record, 1, last_iou);
    while clicks.len() < max_clicks {
        let state = ClickState {
            clicks: clicks.clone(),
            prediction: prediction.clone(),
            gt: gt.clone(),
        };
        match next_click(&state)? {
            None => break, // converged: reuse the last IoU for later budgets
            Some(c) => clicks.push(c),
        }
        prediction = model.predict(embedding, &prompts_from(&clicks))?;
        last_iou = iou(&prediction, gt)?;
        store_at(&mut record, clicks.len(), last_iou);
    }
    // Fill budgets not reached (early convergence) with the last IoU.
    let mut filled = record;
    for (slot, &budget) in CLICK_BUDGETS.iter().enumerate() {
        if clicks.len() < budget {
            filled[slot] = last_iou;
        }
    }
    Ok(ClickRecord {
        iou_at: filled,
        clicks_used: clicks.len(),
    })
}

fn store_at(record: &mut [f32; 3], clicks: usize, value: f32) {
    if let Some(slot) = CLICK_BUDGETS.iter().position(|&b| b == clicks) {
        record[slot] = value;
    }
}

fn prompts_from(clicks: &[Click]) -> PromptSet {
    PromptSet {
        points: clicks
            .iter()
            .map(|c| (c.x as f32 + 0.5, c.y as f32 + 0.5, c.label))
            .collect(),
        bbox: None,
    }
}

/// One dataset item: an image with its ground-truth instance masks in model
/// input space.
pub struct EvalItem {
    pub image: crate::tensor::Tensor,
    pub masks: Vec<MaskBitmap>,
}

/// Point-prompted evaluation over a dataset: mean IoU after 1, 3 and 5
/// clicks, averaged over masks in dataset order.
pub fn click_eval<S: Segmenter>(model: &S, dataset: &[EvalItem]) -> Result<ClickEvalReport> {
    let mut per_mask = Vec::new();
    for (img_idx, item) in dataset.iter().enumerate() {
        let embedding = model.embed(&item.image)?;
        for (mask_idx, gt) in item.masks.iter().enumerate() {
            let rec = click_episode(model, &embedding, gt, *CLICK_BUDGETS.last().unwrap())?;
            per_mask.push(MaskClickRow {
                image: img_idx,
                mask: mask_idx,
                area: gt.area(),
                record: rec,
            });
        }
    }
    if per_mask.is_empty() {
        return Err(Error::Invalid("click_eval on an empty dataset".into()));
    }
    let n = per_mask.len() as f32;
    let mut miou = [0.0f32; 3];
    for row in &per_mask {
        for (slot, m) in miou.iter_mut().enumerate() {
            *m += row.record.iou_at[slot];
        }
    }
    for m in miou.iter_mut() {
        *m /= n;
    }
    Ok(ClickEvalReport { miou, per_mask })
}

pub struct MaskClickRow {
    pub image: usize,
    pub mask: usize,
    pub area: usize,
    pub record: ClickRecord,
}

pub struct ClickEvalReport {
    /// Mean IoU at 1, 3 and 5 clicks.
    pub miou: [f32; 3],
    pub per_mask: Vec<MaskClickRow>,
}

// ── Box-prompted evaluation ─────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

/// COCO-style area thresholds 32^2 and 96^2, scaled by
/// `(input_size / 1024)^2` so the buckets keep their relative meaning at
/// small input resolutions.
pub fn size_bucket(area: usize, input_size: usize) -> SizeBucket {
    let scale = (input_size as f32 / 1024.0) * (input_size as f32 / 1024.0);
    let small = 32.0 * 32.0 * scale;
    let medium = 96.0 * 96.0 * scale;
    let a = area as f32;
    if a < small {
        SizeBucket::Small
    } else if a < medium {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

pub struct MaskBoxRow {
    pub image: usize,
    pub mask: usize,
    pub area: usize,
    pub bucket: SizeBucket,
    pub iou: f32,
}

pub struct BoxEvalReport {
    pub miou: f32,
    /// Per-bucket (count, mean IoU); buckets with no masks report count 0.
    pub buckets: [(usize, f32); 3],
    pub per_mask: Vec<MaskBoxRow>,
}

/// Box-prompted evaluation: one tight ground-truth box per mask.
pub fn box_eval<S: Segmenter>(model: &S, dataset: &[EvalItem]) -> Result<BoxEvalReport> {
    let mut per_mask = Vec::new();
    for (img_idx, item) in dataset.iter().enumerate() {
        let embedding = model.embed(&item.image)?;
        for (mask_idx, gt) in item.masks.iter().enumerate() {
            let (x0, y0, x1, y1) = gt
                .tight_box()
                .ok_or_else(|| Error::Invalid("empty ground-truth mask".into()))?;
            let prompts = PromptSet {
                points: vec![],
                bbox: Some((x0 as f32, y0 as f32, x1 as f32, y1 as f32)),
            };
            let prediction = model.predict(&embedding, &prompts)?;
            per_mask.push(MaskBoxRow {
                image: img_idx,
                mask: mask_idx,
                area: gt.area(),
                bucket: size_bucket(gt.area(), model.input_size()),
                iou: iou(&prediction, gt)?,
            });
        }
    }
    if per_mask.is_empty() {
        return Err(Error::Invalid("box_eval on an empty dataset".into()));
    }
    let miou = per_mask.iter().map(|r| r.iou).sum::<f32>() / per_mask.len() as f32;
    let mut buckets = [(0usize, 0.0f32); 3];
    for row in &per_mask {
        let slot = match row.bucket {
            SizeBucket::Small => 0,
            SizeBucket::Medium => 1,
            SizeBucket::Large => 2,
        };
        buckets[slot].0 += 1;
        buckets[slot].1 += row.iou;
    }
    for (count, sum) in buckets.iter_mut() {
        if *count > 0 {
            *sum /= *count as f32;
        }
    }
    Ok(BoxEvalReport {
        miou,
        buckets,
        per_mask,
    })
}
