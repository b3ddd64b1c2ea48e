//! Segmentation losses on the tape: pixelwise focal, dice, the min-of-three
//! multimask rule with its quality-score regression term, and the
//! distillation L2.

use crate::eval::{iou, MaskBitmap};
use crate::samhead::MASK_TOKENS;
use crate::tensor::{Tape, Tensor, Value};
use crate::{Error, Result};

/// Pixel clamp for the focal log argument.
const P_FLOOR: f32 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// 20:1 focal-to-dice weighting.
    pub focal_weight: f32,
    pub dice_weight: f32,
    pub focal_gamma: f32,
    pub focal_alpha: f32,
    pub dice_eps: f32,
    /// Weight of the quality-score regression on the selected mask.
    pub iou_weight: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_weight: 20.0,
            dice_weight: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_eps: 1.0,
            iou_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.focal_gamma < 1.0 {
            return Err(Error::Invalid(format!(
                "focal_gamma must be >= 1, got {}",
                self.focal_gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Invalid(format!(
                "focal_alpha must lie in [0,1], got {}",
                self.focal_alpha
            )));
        }
        if self.dice_eps <= 0.0 {
            return Err(Error::Invalid("dice_eps must be > 0".into()));
        }
        for (name, v) in [
            ("focal_weight", self.focal_weight),
            ("dice_weight", self.dice_weight),
            ("iou_weight", self.iou_weight),
        ] {
            if v < 0.0 {
                return Err(Error::Invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Flatten a mask into a `[1, w*h]` 0/1 tensor.
pub fn mask_tensor(mask: &MaskBitmap) -> Tensor {
    Tensor::from_vec(
        &[1, mask.width() * mask.height()],
        mask.bits().iter().map(|&b| b as f32).collect(),
    )
    .expect("mask bits are rectangular")
}

fn check_logits_vs_mask(logits: &Value<'_>, target: &MaskBitmap) -> Result<()> {
    if logits.numel() != target.width() * target.height() {
        return Err(Error::Shape(format!(
            "logits {:?} vs target {}x{}",
            logits.shape(),
            target.width(),
            target.height()
        )));
    }
    Ok(())
}

/// Mean over pixels of `-alpha_t (1 - p_t)^gamma log(p_t)` with
/// `p_t = sigmoid(logit)` on foreground pixels and `1 - sigmoid` on
/// background, `alpha_t = alpha` / `1 - alpha` respectively. The log argument
/// is clamped at 1e-7.
pub fn focal_loss<'t>(
    tape: &'t Tape,
    logits: Value<'t>,
    target: &MaskBitmap,
    gamma: f32,
    alpha: f32,
) -> Result<Value<'t>> {
    check_logits_vs_mask(&logits, target)?;
    let n = logits.numel();
    let flat = logits.reshape(&[1, n])?;
    let t = tape.leaf(&mask_tensor(target))?;
    let t_inv = tape.leaf(&Tensor::from_vec(
        &[1, n],
        target.bits().iter().map(|&b| 1.0 - b as f32).collect(),
    )?)?;
    let alpha_t = tape.leaf(&Tensor::from_vec(
        &[1, n],
        target
            .bits()
            .iter()
            .map(|&b| if b != 0 { alpha } else { 1.0 - alpha })
            .collect(),
    )?)?;
    let p = flat.sigmoid()?;
    let p_inv = p.neg()?.add_scalar(1.0)?;
    let pt = p.mul(t)?.add(p_inv.mul(t_inv)?)?;
    let ptc = pt.clamp_min(P_FLOOR)?;
    let modulator = ptc.neg()?.add_scalar(1.0)?.powf(gamma)?;
    modulator
        .mul(ptc.ln()?)?
        .mul(alpha_t)?
        .neg()?
        .mean_all()
}

/// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)` with `p = sigmoid(logits)`.
pub fn dice_loss<'t>(
    tape: &'t Tape,
    logits: Value<'t>,
    target: &MaskBitmap,
    eps: f32,
) -> Result<Value<'t>> {
    check_logits_vs_mask(&logits, target)?;
    let n = logits.numel();
    let flat = logits.reshape(&[1, n])?;
    let t = tape.leaf(&mask_tensor(target))?;
    let p = flat.sigmoid()?;
    let inter = p.mul(t)?.sum_all()?;
    let tsum = target.area() as f32;
    let num = inter.mul_scalar(2.0)?.add_scalar(eps)?;
    let den = p.sum_all()?.add_scalar(tsum + eps)?;
    num.div(den)?.neg()?.add_scalar(1.0)
}

/// Mean squared difference between two equal-shape tensors (the
/// distillation objective; any channel adapter is applied by the caller).
pub fn distill_l2<'t>(student: Value<'t>, teacher: Value<'t>) -> Result<Value<'t>> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "distill_l2 shapes {:?} vs {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let d = student.sub(teacher)?;
    d.mul(d)?.mean_all()
}

/// Result of the min-of-three selection, with handles kept for inspection.
pub struct MultimaskOutcome<'t> {
    /// Selected combined loss plus the quality regression term.
    pub total: Value<'t>,
    pub selected: usize,
    /// Trace values of the selected branch.
    pub focal: f32,
    pub dice: f32,
    /// Actual IoU of each candidate mask against the target.
    pub actual_iou: [f32; 3],
    /// Per-mask logit slices, exposed so tests can assert that non-selected
    /// branches receive exactly zero gradient.
    pub per_mask_logits: Vec<Value<'t>>,
}

/// Combined per-mask loss `focal_weight * focal + dice_weight * dice` over
/// the three candidates; only the minimum (lowest index on ties) is
/// returned, so gradient flows through that branch alone. The quality head
/// is supervised on the selected mask: `iou_weight * (score - actual IoU)^2`.
pub fn multimask_loss<'t>(
    tape: &'t Tape,
    logits: Value<'t>,
    iou_scores: Value<'t>,
    target: &MaskBitmap,
    cfg: &LossConfig,
) -> Result<MultimaskOutcome<'t>> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != MASK_TOKENS {
        return Err(Error::Shape(format!(
            "multimask_loss wants [3, H, W] logits, got {shape:?}"
        )));
    }
    if (shape[1], shape[2]) != (target.height(), target.width()) {
        return Err(Error::Shape(format!(
            "logit maps {}x{} vs target {}x{}",
            shape[2],
            shape[1],
            target.width(),
            target.height()
        )));
    }
    if iou_scores.shape() != vec![1, 3] {
        return Err(Error::Shape(format!(
            "iou scores want [1, 3], got {:?}",
            iou_scores.shape()
        )));
    }
    let hw = shape[1] * shape[2];
    let rows = logits.reshape(&[MASK_TOKENS, hw])?;
    let mut candidates = Vec::with_capacity(MASK_TOKENS);
    let mut actual_iou = [0.0f32; 3];
    let mut per_mask_logits = Vec::with_capacity(MASK_TOKENS);
    for i in 0..MASK_TOKENS {
        let row = rows.slice2(0, i, i + 1)?;
        per_mask_logits.push(row);
        let focal = focal_loss(tape, row, target, cfg.focal_gamma, cfg.focal_alpha)?;
        let dice = dice_loss(tape, row, target, cfg.dice_eps)?;
        let combined = focal
            .mul_scalar(cfg.focal_weight)?
            .add(dice.mul_scalar(cfg.dice_weight)?)?;
        // Actual IoU of the thresholded candidate, for the quality target.
        let bits = tape
            .tensor(row)
            .data()
            .iter()
            .map(|&v| (v > 0.0) as u8)
            .collect();
        let pred = MaskBitmap::from_bits(target.width(), target.height(), bits)?;
        actual_iou[i] = iou(&pred, target)?;
        candidates.push((combined, focal, dice));
    }
    let mut selected = 0usize;
    for i in 1..MASK_TOKENS {
        if tape.item(candidates[i].0) < tape.item(candidates[selected].0) {
            selected = i;
        }
    }
    let (combined, focal, dice) = candidates[selected];
    let score = iou_scores.slice2(1, selected, selected + 1)?;
    let delta = score.add_scalar(-actual_iou[selected])?;
    let quality = delta.mul(delta)?.reshape(&[1])?;
    let total = combined.add(quality.mul_scalar(cfg.iou_weight)?)?;
    Ok(MultimaskOutcome {
        total,
        selected,
        focal: tape.item(focal),
        dice: tape.item(dice),
        actual_iou,
        per_mask_logits,
    })
}
