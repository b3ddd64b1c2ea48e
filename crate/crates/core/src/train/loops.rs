//! The two training phases: embedding distillation and end-to-end
//! prompt-supervised training.

use crate::eval::MaskBitmap;
use crate::model::Model;
use crate::params::{Ctx, ParamId};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Value};
use crate::{Error, Result};

use super::losses::{distill_l2, multimask_loss, LossConfig};
use super::optim::{cosine_lr, AdamW};
use super::preprocess::preprocess;
use super::sample::sample_prompt;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub max_masks_per_image: usize,
    pub min_points: usize,
    pub max_points: usize,
    pub hflip_prob: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr_init: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            max_masks_per_image: 64,
            min_points: 1,
            max_points: 10,
            hflip_prob: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch_size must be >= 1".into()));
        }
        if !(1..=self.max_points).contains(&self.min_points) || self.max_points > 10 {
            return Err(Error::Invalid(format!(
                "point range {}..={} must satisfy 1 <= min <= max <= 10",
                self.min_points, self.max_points
            )));
        }
        if self.lr_init <= 0.0 {
            return Err(Error::Invalid("lr_init must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Invalid("hflip_prob must lie in [0, 1]".into()));
        }
        if self.max_masks_per_image == 0 {
            return Err(Error::Invalid("max_masks_per_image must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// One raw training example: an image with instance masks, both in dataset
/// space (preprocessing happens inside the loop).
pub struct TrainItem {
    pub image: Tensor,
    pub masks: Vec<MaskBitmap>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepTrace {
    pub step: u64,
    pub lr: f32,
    pub focal: f32,
    pub dice: f32,
    pub total: f32,
}

#[derive(Clone, Copy, Debug)]
pub struct DistillTrace {
    pub step: u64,
    pub lr: f32,
    pub loss: f32,
}

fn collect_grads(
    model: &Model,
    ctx: &Ctx<'_, '_>,
    grads: &crate::tensor::Grads,
) -> Vec<(ParamId, Vec<f32>)> {
    let mut out = Vec::new();
    for (id, entry) in model.store.iter() {
        if !entry.trainable {
            continue;
        }
        if let Some(leaf) = ctx.used_leaf(id) {
            if let Some(g) = grads.of(leaf) {
                out.push((id, g.to_vec()));
            }
        }
    }
    out
}

/// End-to-end training: per step, for each image in the batch, preprocess
/// with a seeded horizontal flip, sample up to `max_masks_per_image` masks,
/// draw one prompt per mask, decode against a single image embedding, apply
/// the min-of-three loss, average over masks then over images, and take one
/// AdamW step on the cosine schedule. Aborts with an error if the loss ever
/// turns non-finite.
pub fn train_loop(
    model: &mut Model,
    dataset: &[TrainItem],
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    max_steps: Option<usize>,
) -> Result<Vec<StepTrace>> {
    tcfg.validate()?;
    lcfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("train_loop on an empty dataset".into()));
    }
    let batches_per_epoch = dataset.len().div_ceil(tcfg.batch_size);
    let mut total_steps = tcfg.epochs * batches_per_epoch;
    if let Some(cap) = max_steps {
        total_steps = total_steps.min(cap);
    }
    if total_steps == 0 {
        return Ok(vec![]);
    }
    let mut optimizer = AdamW::new(&model.store, tcfg.beta1, tcfg.beta2, tcfg.weight_decay);
    let master = Rng::new(tcfg.seed);
    let input_size = model.config.input_size;
    let mut trace = Vec::with_capacity(total_steps);
    let mut local_step = 0usize;

    'epochs: for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        master.fork(0x0e90_0000 + epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(tcfg.batch_size) {
            if local_step >= total_steps {
                break 'epochs;
            }
            let lr = cosine_lr(local_step, total_steps, tcfg.lr_init)?;
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.store);
            let mut image_losses: Vec<Value<'_>> = Vec::new();
            let mut focal_sum = 0.0f32;
            let mut dice_sum = 0.0f32;
            let mut mask_count = 0usize;
            for &idx in chunk {
                let item = &dataset[idx];
                // Per-item streams keyed by (epoch, item), independent of
                // batch composition and execution order.
                let tag = ((epoch as u64) << 32) | idx as u64;
                let mut item_rng = master.fork(tag);
                let flip = item_rng.next_bool(tcfg.hflip_prob);
                let (img, masks, _) = preprocess(&item.image, &item.masks, input_size, flip)?;
                let mut usable: Vec<MaskBitmap> =
                    masks.into_iter().filter(|m| !m.is_empty()).collect();
                if usable.is_empty() {
                    continue;
                }
                if usable.len() > tcfg.max_masks_per_image {
                    let keep = item_rng.sample_distinct(usable.len(), tcfg.max_masks_per_image);
                    let mut kept: Vec<MaskBitmap> = Vec::with_capacity(keep.len());
                    let mut sorted = keep;
                    sorted.sort_unstable();
                    for k in sorted {
                        kept.push(usable[k].clone());
                    }
                    usable = kept;
                }
                let image_value = tape.leaf(&img)?;
                let embedding = model.encode_values(&ctx, image_value)?;
                let mut mask_losses: Vec<Value<'_>> = Vec::new();
                for (mi, gt) in usable.iter().enumerate() {
                    let mut mask_rng = item_rng.fork(0x3a5c + mi as u64);
                    let (x0, y0, x1, y1) = gt.tight_box().expect("nonempty");
                    let gt_box = (x0 as f32, y0 as f32, x1 as f32, y1 as f32);
                    let prompt = sample_prompt(
                        &mut mask_rng,
                        gt,
                        gt_box,
                        tcfg.min_points,
                        tcfg.max_points,
                    )?;
                    let decoded = model.decode_values(&ctx, embedding, &prompt)?;
                    let full = decoded.logits.upsample2x()?.upsample2x()?;
                    let outcome = multimask_loss(&tape, full, decoded.iou, gt, lcfg)?;
                    focal_sum += outcome.focal;
                    dice_sum += outcome.dice;
                    mask_count += 1;
                    mask_losses.push(outcome.total);
                }
                let mut acc = mask_losses[0];
                for l in &mask_losses[1..] {
                    acc = acc.add(*l)?;
                }
                image_losses.push(acc.mul_scalar(1.0 / mask_losses.len() as f32)?);
            }
            if image_losses.is_empty() {
                return Err(Error::Invalid(
                    "batch contained no usable masks after preprocessing".into(),
                ));
            }
            let mut batch_loss = image_losses[0];
            for l in &image_losses[1..] {
                batch_loss = batch_loss.add(*l)?;
            }
            batch_loss = batch_loss.mul_scalar(1.0 / image_losses.len() as f32)?;
            let total = tape.item(batch_loss);
            if !total.is_finite() {
                return Err(Error::NonFinite("training loss diverged".into()));
            }
            let grads = tape.backward(batch_loss)?;
            let grad_list = collect_grads(model, &ctx, &grads);
            drop(grads);
            drop(ctx);
            drop(tape);
            model.step += 1;
            optimizer.step(&mut model.store, &grad_list, model.step, lr)?;
            trace.push(StepTrace {
                step: model.step,
                lr,
                focal: focal_sum / mask_count.max(1) as f32,
                dice: dice_sum / mask_count.max(1) as f32,
                total,
            });
            local_step += 1;
        }
    }
    Ok(trace)
}

/// Distillation: drive the student encoder's embedding toward precomputed
/// teacher embeddings under mean-squared error. `teacher_embs[i]` must match
/// the student's embedding shape for preprocessed `images[i]` (any channel
/// adapter is applied by the caller when building the targets).
pub fn distill_loop(
    student: &mut Model,
    images: &[Tensor],
    teacher_embs: &[Tensor],
    tcfg: &TrainConfig,
    steps: usize,
) -> Result<Vec<DistillTrace>> {
    tcfg.validate()?;
    if images.is_empty() || images.len() != teacher_embs.len() {
        return Err(Error::Invalid(format!(
            "distill_loop wants matching nonempty image/teacher lists, got {} vs {}",
            images.len(),
            teacher_embs.len()
        )));
    }
    let mut optimizer = AdamW::new(&student.store, tcfg.beta1, tcfg.beta2, tcfg.weight_decay);
    let master = Rng::new(tcfg.seed);
    let input_size = student.config.input_size;
    // Preprocess once; distillation uses no flip augmentation.
    let mut prepped = Vec::with_capacity(images.len());
    for img in images {
        let (p, _, _) = preprocess(img, &[], input_size, false)?;
        prepped.push(p);
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    master.fork(0xd157).shuffle(&mut order);
    let mut cursor = 0usize;
    let mut trace = Vec::with_capacity(steps);
    for local in 0..steps {
        let lr = cosine_lr(local, steps, tcfg.lr_init)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &student.store);
        let mut losses = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size.min(images.len()) {
            if cursor == order.len() {
                cursor = 0;
                master
                    .fork(0xd157 ^ (local as u64 + 1))
                    .shuffle(&mut order);
            }
            let idx = order[cursor];
            cursor += 1;
            let img_value = tape.leaf(&prepped[idx])?;
            let emb = student.encode_values(&ctx, img_value)?;
            let target = tape.leaf(&teacher_embs[idx])?;
            losses.push(distill_l2(emb, target)?);
        }
        let mut loss = losses[0];
        for l in &losses[1..] {
            loss = loss.add(*l)?;
        }
        loss = loss.mul_scalar(1.0 / losses.len() as f32)?;
        let value = tape.item(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("distillation loss diverged".into()));
        }
        let grads = tape.backward(loss)?;
        let grad_list = collect_grads(student, &ctx, &grads);
        drop(grads);
        drop(ctx);
        drop(tape);
        student.step += 1;
        optimizer.step(&mut student.store, &grad_list, student.step, lr)?;
        trace.push(DistillTrace {
            step: student.step,
            lr,
            loss: value,
        });
    }
    Ok(trace)
}

// ── Toy teacher ─────────────────────────────────────────────────────

/// Frozen random-weight convolutional teacher: four stride-2 stages map a
/// `[3, S, S]` image to `[out_channels, S/16, S/16]`. Stands in for a large
/// pretrained encoder; only the distillation machinery is exercised.
pub struct Teacher {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    pub out_channels: usize,
    pub input_size: usize,
    /// Optional frozen 1x1 adapter mapping teacher channels onto the
    /// student embedding width.
    adapter: Option<Tensor>,
}

impl Teacher {
    pub fn new(seed: u64, input_size: usize, out_channels: usize) -> Result<Self> {
        if input_size % 16 != 0 {
            return Err(Error::Invalid(format!(
                "teacher input {input_size} must be divisible by 16"
            )));
        }
        let mut rng = Rng::new(seed);
        let widths = [3usize, 8, 16, 32, out_channels];
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..4 {
            weights.push(crate::params::init_conv(
                &mut rng,
                &[widths[i + 1], widths[i], 3, 3],
            ));
            biases.push(Tensor::from_fn(&[widths[i + 1], 1, 1], |_| {
                rng.next_gaussian() * 0.1
            }));
        }
        Ok(Teacher {
            weights,
            biases,
            out_channels,
            input_size,
            adapter: None,
        })
    }

    /// Attach a frozen seeded adapter projecting onto `student_dim` channels.
    pub fn with_adapter(mut self, seed: u64, student_dim: usize) -> Self {
        if student_dim != self.out_channels {
            let mut rng = Rng::new(seed);
            self.adapter = Some(crate::params::init_conv(
                &mut rng,
                &[student_dim, self.out_channels, 1, 1],
            ));
        }
        self
    }

    /// Embed a preprocessed `[3, S, S]` image.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != [3, self.input_size, self.input_size] {
            return Err(Error::Shape(format!(
                "teacher wants [3, {0}, {0}], got {1:?}",
                self.input_size,
                image.shape()
            )));
        }
        let tape = Tape::new();
        let mut x = tape.leaf(image)?;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wv = tape.leaf(w)?;
            let bv = tape.leaf(b)?;
            x = x.conv2d(wv, 1, 1, 1)?.downsample2x()?.add(bv)?;
            if i + 1 < self.weights.len() {
                x = x.relu()?;
            }
        }
        if let Some(adapter) = &self.adapter {
            let av = tape.leaf(adapter)?;
            x = x.conv2d(av, 1, 0, 1)?;
        }
        Ok(tape.tensor(x))
    }
}

/// Flattened cosine similarity between two equal-shape tensors (f64
/// accumulation); used to measure distillation quality.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "cosine of {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine of a zero tensor".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            name: "tiny".into(),
            input_size: 64,
            stage_depths: [1, 1, 1, 1, 1],
            stage_widths: [4, 8, 8, 16, 16],
            neck_width: 8,
            embed_dim: 16,
            head_dim: 8,
            stage4_scales: vec![],
            stage5_scales: vec![],
            ..ModelConfig::desk()
        };
        Model::new(cfg, seed).unwrap()
    }

    fn toy_item(seed: u64) -> TrainItem {
        let mut rng = Rng::new(seed);
        let mut mask = MaskBitmap::new(64, 64);
        for y in 20..44 {
            for x in 16..40 {
                mask.set(x, y, true);
            }
        }
        let image = Tensor::from_fn(&[3, 64, 64], |i| {
            let p = i % (64 * 64);
            let (x, y) = (p % 64, p / 64);
            if mask.get(x, y) {
                0.8
            } else {
                0.15 + 0.05 * rng.next_f32()
            }
        });
        TrainItem {
            image,
            masks: vec![mask],
        }
    }

    fn cfg_for_test(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 1,
            lr_init: 1e-3,
            weight_decay: 0.0,
            hflip_prob: 0.0,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_trace_constant() {
        let mut model = tiny_model(1);
        let items = vec![toy_item(2)];
        let tcfg = TrainConfig {
            lr_init: 1e-20, // cosine of a positive lr; effectively zero
            epochs: 3,
            ..cfg_for_test(5)
        };
        let trace = train_loop(&mut model, &items, &tcfg, &LossConfig::default(), None).unwrap();
        assert_eq!(trace.len(), 3);
        // With a vanishing learning rate the parameters barely move, so the
        // per-step total stays constant to float precision.
        assert!((trace[0].total - trace[2].total).abs() < 1e-5);
    }

    #[test]
    fn fixed_seed_gives_bitwise_identical_traces() {
        let run = || {
            let mut model = tiny_model(3);
            let items = vec![toy_item(4), toy_item(9)];
            train_loop(
                &mut model,
                &items,
                &cfg_for_test(7),
                &LossConfig::default(),
                Some(4),
            )
            .unwrap()
            .iter()
            .map(|t| (t.total, t.focal, t.dice, t.lr))
            .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_short_overfit() {
        let mut model = tiny_model(11);
        let items = vec![toy_item(12)];
        let tcfg = TrainConfig {
            epochs: 30,
            ..cfg_for_test(13)
        };
        let trace = train_loop(&mut model, &items, &tcfg, &LossConfig::default(), None).unwrap();
        let first = trace.first().unwrap().total;
        let last = trace.last().unwrap().total;
        assert!(last < first, "loss should drop: {first} -> {last}");
        assert_eq!(model.step, 30);
    }

    #[test]
    fn distill_zero_loss_when_teacher_equals_student() {
        let mut student = tiny_model(21);
        let mut rng = Rng::new(22);
        let images: Vec<Tensor> = (0..2)
            .map(|_| Tensor::from_fn(&[3, 64, 64], |_| rng.next_f32()))
            .collect();
        // Teacher targets are the student's own initial embeddings.
        let targets: Vec<Tensor> = images
            .iter()
            .map(|img| {
                let (p, _, _) = preprocess(img, &[], 64, false).unwrap();
                student.embed_image(&p).unwrap()
            })
            .collect();
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..cfg_for_test(23)
        };
        let trace = distill_loop(&mut student, &images, &targets, &tcfg, 1).unwrap();
        assert_eq!(trace[0].loss, 0.0, "loss 0 at step 0 when already matched");
    }

    #[test]
    fn distill_loss_drops_against_toy_teacher() {
        let mut student = tiny_model(31);
        let teacher = Teacher::new(77, 64, 16).unwrap();
        let mut rng = Rng::new(32);
        let images: Vec<Tensor> = (0..4)
            .map(|_| Tensor::from_fn(&[3, 64, 64], |_| rng.next_f32()))
            .collect();
        let targets: Vec<Tensor> = images
            .iter()
            .map(|img| {
                let (p, _, _) = preprocess(img, &[], 64, false).unwrap();
                teacher.embed(&p).unwrap()
            })
            .collect();
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr_init: 3e-3,
            ..cfg_for_test(33)
        };
        let trace = distill_loop(&mut student, &images, &targets, &tcfg, 20).unwrap();
        assert!(trace[19].loss < trace[0].loss);
    }

    #[test]
    fn teacher_adapter_reconciles_channel_mismatch() {
        let teacher = Teacher::new(5, 64, 24).unwrap().with_adapter(6, 16);
        let img = Tensor::from_fn(&[3, 64, 64], |i| (i % 11) as f32 / 11.0);
        let emb = teacher.embed(&img).unwrap();
        assert_eq!(emb.shape(), &[16, 4, 4]);
        // Same seed, same embedding.
        let teacher2 = Teacher::new(5, 64, 24).unwrap().with_adapter(6, 16);
        assert_eq!(teacher2.embed(&img).unwrap().data(), emb.data());
    }

    #[test]
    fn cosine_similarity_basics() {
        let a = Tensor::from_vec(&[4], vec![1.0, 0.0, 2.0, -1.0]).unwrap();
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        let b = Tensor::from_vec(&[4], vec![-1.0, 0.0, -2.0, 1.0]).unwrap();
        assert!((cosine_similarity(&a, &b).unwrap() + 1.0).abs() < 1e-6);
        assert!(cosine_similarity(&a, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut model = tiny_model(41);
        assert!(train_loop(
            &mut model,
            &[],
            &TrainConfig::default(),
            &LossConfig::default(),
            None
        )
        .is_err());
    }
}
