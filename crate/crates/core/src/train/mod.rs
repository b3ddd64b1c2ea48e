//! Training: losses, the AdamW optimizer with cosine decay, prompt and data
//! sampling, preprocessing, and the distillation / end-to-end loops.

mod loops;
mod losses;
mod optim;
mod preprocess;
mod sample;

pub use loops::{
    cosine_similarity, distill_loop, train_loop, DistillTrace, StepTrace, Teacher, TrainConfig,
    TrainItem,
};
pub use losses::{
    dice_loss, distill_l2, focal_loss, mask_tensor, multimask_loss, LossConfig, MultimaskOutcome,
};
pub use optim::{adamw_update, cosine_lr, AdamW, ADAM_EPS};
pub use preprocess::{preprocess, Transform};
pub use sample::{sample_point_prompt, sample_prompt};

use crate::Result;
use std::io::Write;
use std::path::Path;

/// Write an end-to-end training trace as CSV: `step,lr,focal,dice,total`.
pub fn write_train_trace(path: &Path, trace: &[StepTrace]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,lr,focal,dice,total")?;
    for t in trace {
        writeln!(f, "{},{},{},{},{}", t.step, t.lr, t.focal, t.dice, t.total)?;
    }
    Ok(())
}

/// Write a distillation trace as CSV: `step,lr,loss`.
pub fn write_distill_trace(path: &Path, trace: &[DistillTrace]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,lr,loss")?;
    for t in trace {
        writeln!(f, "{},{},{}", t.step, t.lr, t.loss)?;
    }
    Ok(())
}
