//! Subcommand implementations. Every command writes only under its `--out`
//! directory and is deterministic given its seeds.

use promptseg::backbone::ModelConfig;
use promptseg::cost::{self, AttentionForm};
use promptseg::data::{self, Configs, SyntheticScene};
use promptseg::eval::{box_eval, click_eval, EvalItem, SizeBucket, CLICK_BUDGETS};
use promptseg::model::Model;
use promptseg::tensor::Tensor;
use promptseg::train::{self, preprocess, Teacher, TrainItem};
use promptseg::{Error, Result};

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

const OK: ExitCode = ExitCode::SUCCESS;

fn quiet() -> bool {
    std::env::var_os("PROMPTSEG_QUIET").is_some()
}

macro_rules! info {
    ($($arg:tt)*) => {
        if !quiet() {
            println!($($arg)*);
        }
    };
}

fn load_configs(path: Option<&Path>) -> Result<Configs> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Config {
                    line: 0,
                    msg: format!("config file {} does not exist", p.display()),
                });
            }
            data::parse_config(p)
        }
        None => Ok(Configs::default()),
    }
}

fn require_checkpoint(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config {
            line: 0,
            msg: format!("checkpoint {} does not exist", path.display()),
        });
    }
    Ok(())
}

pub fn gen(
    seed: u64,
    count: usize,
    size: usize,
    max_instances: usize,
    out: &Path,
) -> Result<ExitCode> {
    let scenes = data::gen_dataset(seed, count, size, max_instances)?;
    std::fs::create_dir_all(out)?;
    data::write_dataset(out, &scenes)?;
    let instances: usize = scenes.iter().map(|s| s.instances.len()).sum();
    info!(
        "wrote {count} images ({instances} instances) at {size}x{size} to {}",
        out.display()
    );
    Ok(OK)
}

/// Dataset scenes as raw train items.
fn to_train_items(scenes: Vec<SyntheticScene>) -> Vec<TrainItem> {
    scenes
        .into_iter()
        .map(|s| TrainItem {
            image: s.image,
            masks: s.instances.into_iter().map(|i| i.mask).collect(),
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn distill(
    config: Option<&Path>,
    teacher_seed: u64,
    teacher_channels: Option<usize>,
    data_dir: &Path,
    out: &Path,
    steps: usize,
    model_seed: u64,
    resume: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = load_configs(config)?;
    let mut model = Model::new(cfg.model.clone(), model_seed)?;
    if let Some(ckpt) = resume {
        require_checkpoint(ckpt)?;
        data::load_checkpoint_into(ckpt, &mut model)?;
        info!("resumed from {} at step {}", ckpt.display(), model.step);
    }
    let scenes = data::load_dataset(data_dir)?;
    if scenes.is_empty() {
        return Err(Error::Invalid("dataset is empty".into()));
    }
    let images: Vec<Tensor> = scenes.into_iter().map(|s| s.image).collect();
    let t_channels = teacher_channels.unwrap_or(cfg.model.embed_dim);
    let teacher = Teacher::new(teacher_seed, cfg.model.input_size, t_channels)?
        .with_adapter(teacher_seed.wrapping_add(1), cfg.model.embed_dim);
    let mut targets = Vec::with_capacity(images.len());
    for img in &images {
        let (p, _, _) = preprocess(img, &[], cfg.model.input_size, false)?;
        targets.push(teacher.embed(&p)?);
    }
    let trace = train::distill_loop(&mut model, &images, &targets, &cfg.train, steps)?;
    std::fs::create_dir_all(out)?;
    train::write_distill_trace(&out.join("distill_trace.csv"), &trace)?;
    data::save_checkpoint(&out.join("distill.ckpt"), &model)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        info!(
            "distilled {} steps: loss {} -> {} (checkpoint at step {})",
            trace.len(),
            first.loss,
            last.loss,
            model.step
        );
    }
    Ok(OK)
}

pub fn train(
    config: Option<&Path>,
    init: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    steps: Option<usize>,
    model_seed: u64,
) -> Result<ExitCode> {
    let cfg = load_configs(config)?;
    let mut model = Model::new(cfg.model.clone(), model_seed)?;
    if let Some(ckpt) = init {
        require_checkpoint(ckpt)?;
        data::load_checkpoint_into(ckpt, &mut model)?;
        info!("initialized from {} (step {})", ckpt.display(), model.step);
    }
    let scenes = data::load_dataset(data_dir)?;
    if scenes.is_empty() {
        return Err(Error::Invalid("dataset is empty".into()));
    }
    let items = to_train_items(scenes);
    let trace = train::train_loop(&mut model, &items, &cfg.train, &cfg.loss, steps)?;
    std::fs::create_dir_all(out)?;
    train::write_train_trace(&out.join("train_trace.csv"), &trace)?;
    data::save_checkpoint(&out.join("model.ckpt"), &model)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        info!(
            "trained {} steps: loss {} -> {}",
            trace.len(),
            first.total,
            last.total
        );
    }
    Ok(OK)
}

fn bucket_tag(b: SizeBucket) -> &'static str {
    match b {
        SizeBucket::Small => "small",
        SizeBucket::Medium => "medium",
        SizeBucket::Large => "large",
    }
}

pub fn eval(mode: &str, ckpt: &Path, data_dir: &Path, out: &Path, clicks: usize) -> Result<ExitCode> {
    require_checkpoint(ckpt)?;
    let model = data::load_model(ckpt)?;
    let scenes = data::load_dataset(data_dir)?;
    let mut dataset = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let masks: Vec<_> = scene.instances.iter().map(|i| i.mask.clone()).collect();
        let (image, masks, _) = preprocess(&scene.image, &masks, model.config.input_size, false)?;
        let masks: Vec<_> = masks.into_iter().filter(|m| !m.is_empty()).collect();
        if !masks.is_empty() {
            dataset.push(EvalItem { image, masks });
        }
    }
    if dataset.is_empty() {
        eprintln!("error: dataset is empty");
        return Ok(ExitCode::from(1));
    }
    std::fs::create_dir_all(out)?;
    let mut summary = String::new();
    match mode {
        "point" => {
            if clicks == 0 {
                return Err(Error::Invalid("--clicks must be >= 1".into()));
            }
            let budget = clicks.min(*CLICK_BUDGETS.last().unwrap());
            let mut report = None;
            if budget == *CLICK_BUDGETS.last().unwrap() {
                report = Some(click_eval(&model, &dataset)?);
            }
            let report = match report {
                Some(r) => r,
                None => {
                    return Err(Error::Invalid(format!(
                        "point mode reports IoU at clicks {CLICK_BUDGETS:?}; --clicks must be >= 5"
                    )))
                }
            };
            let mut csv = String::from("mask_id,area_bucket,iou@1,iou@3,iou@5\n");
            for row in &report.per_mask {
                csv.push_str(&format!(
                    "{}_{},{},{},{},{}\n",
                    row.image,
                    row.mask,
                    bucket_tag(promptseg::eval::size_bucket(row.area, model.config.input_size)),
                    row.record.iou_at[0],
                    row.record.iou_at[1],
                    row.record.iou_at[2],
                ));
            }
            std::fs::write(out.join("point_eval.csv"), csv)?;
            summary.push_str(&format!("mode = point\nmasks = {}\n", report.per_mask.len()));
            for (slot, budget) in CLICK_BUDGETS.iter().enumerate() {
                summary.push_str(&format!("miou@{budget} = {}\n", report.miou[slot]));
            }
        }
        "box" => {
            let report = box_eval(&model, &dataset)?;
            let mut csv = String::from("mask_id,area_bucket,box_iou\n");
            for row in &report.per_mask {
                csv.push_str(&format!(
                    "{}_{},{},{}\n",
                    row.image,
                    row.mask,
                    bucket_tag(row.bucket),
                    row.iou
                ));
            }
            std::fs::write(out.join("box_eval.csv"), csv)?;
            summary.push_str(&format!(
                "mode = box\nmasks = {}\nmiou = {}\n",
                report.per_mask.len(),
                report.miou
            ));
            for (slot, tag) in ["small", "medium", "large"].iter().enumerate() {
                let (count, miou) = report.buckets[slot];
                summary.push_str(&format!("count_{tag} = {count}\n"));
                if count > 0 {
                    summary.push_str(&format!("miou_{tag} = {miou}\n"));
                }
            }
        }
        other => {
            eprintln!("error: unknown eval mode `{other}` (expected point|box)");
            return Ok(ExitCode::from(1));
        }
    }
    std::fs::write(out.join("summary.txt"), &summary)?;
    info!("{summary}");
    Ok(OK)
}

pub fn bench(
    config: Option<&Path>,
    input_size: Option<usize>,
    mode: &str,
    warmup: usize,
    reps: usize,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = load_configs(config)?;
    let size = input_size.unwrap_or(cfg.model.input_size);
    match mode {
        "macs" => {
            let report = cost::count_macs(&cfg.model, size)?;
            println!("{}", report.to_table());
            if let Some(dir) = out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("cost.csv"), report.to_csv())?;
            }
        }
        "time" => {
            let mut model_cfg: ModelConfig = cfg.model.clone();
            model_cfg.input_size = size;
            let model = Model::new(model_cfg, 0)?;
            let t = cost::time_forward(&model, warmup, reps)?;
            println!(
                "forward (encoder + box-prompt decode) at {size}: median {:.3} ms, mad {:.3} ms, {:.2} images/s over {} reps",
                t.median_ms, t.mad_ms, t.images_per_s, reps
            );
            if let Some(dir) = out {
                std::fs::create_dir_all(dir)?;
                let mut f = std::fs::File::create(dir.join("timing.csv"))?;
                writeln!(f, "sample_ms")?;
                for s in &t.samples_ms {
                    writeln!(f, "{s}")?;
                }
            }
        }
        "attn-scaling" => {
            let d = 32usize;
            let sizes = [1024usize, 2048, 4096];
            println!("attention scaling at d = {d} (median of {reps} reps):");
            let mut medians = [[0.0f64; 3]; 2];
            for (fi, form) in [AttentionForm::Fast, AttentionForm::Quadratic]
                .into_iter()
                .enumerate()
            {
                for (ni, &n) in sizes.iter().enumerate() {
                    let t = cost::time_attention(form, n, d, warmup, reps)?;
                    medians[fi][ni] = t.median_ms;
                    println!("  {:?} n={n}: {:.3} ms", form, t.median_ms);
                }
            }
            let fast_ratio = medians[0][2] / medians[0][0];
            let quad_ratio = medians[1][2] / medians[1][0];
            println!("fast      time(4096)/time(1024) = {fast_ratio:.2} (budget <= 6)");
            println!("quadratic time(4096)/time(1024) = {quad_ratio:.2} (budget >= 10)");
            if fast_ratio > 6.0 || quad_ratio < 10.0 {
                eprintln!("error: scaling ratios violate the linear-attention invariant");
                return Ok(ExitCode::from(4));
            }
        }
        other => {
            eprintln!("error: unknown bench mode `{other}` (expected macs|time|attn-scaling)");
            return Ok(ExitCode::from(1));
        }
    }
    Ok(OK)
}
