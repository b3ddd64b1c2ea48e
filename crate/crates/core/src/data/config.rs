//! Line-oriented configuration files: `key = value` pairs under square
//! bracket section headers, `#` comments, empty file means all defaults.
//! Unknown keys are errors with their line number — no silent typo
//! acceptance.

use crate::attention::AttentionConfig;
use crate::backbone::{ModelConfig, StageKind};
use crate::train::{LossConfig, TrainConfig};
use crate::{Error, Result};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct Configs {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Standalone attention geometry used by the benchmark subcommands.
    pub attention: AttentionConfig,
}

impl Default for Configs {
    fn default() -> Self {
        Configs {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            attention: AttentionConfig::default(),
        }
    }
}

pub fn parse_config(path: &Path) -> Result<Configs> {
    let text = std::fs::read_to_string(path)?;
    parse_config_text(&text)
}

fn cfg_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| cfg_err(line, format!("cannot parse `{v}` for key `{key}`")))
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(vec![]);
    }
    v.split(',')
        .map(|p| parse_num::<usize>(line, key, p.trim()))
        .collect()
}

fn parse_five(line: usize, key: &str, v: &str) -> Result<[usize; 5]> {
    let list = parse_list(line, key, v)?;
    list.try_into()
        .map_err(|_| cfg_err(line, format!("key `{key}` wants exactly 5 values")))
}

pub fn parse_config_text(text: &str) -> Result<Configs> {
    let mut cfg = Configs::default();
    let mut section = String::from("model");
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(cfg_err(line_no, format!("malformed section header `{line}`")));
            }
            let name = line[1..line.len() - 1].trim();
            match name {
                "model" | "train" | "loss" | "attention" => section = name.to_string(),
                other => return Err(cfg_err(line_no, format!("unknown section `[{other}]`"))),
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| cfg_err(line_no, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        let v = value.trim();
        match section.as_str() {
            "model" => apply_model_key(&mut cfg.model, line_no, key, v)?,
            "train" => apply_train_key(&mut cfg.train, line_no, key, v)?,
            "loss" => apply_loss_key(&mut cfg.loss, line_no, key, v)?,
            "attention" => apply_attention_key(&mut cfg.attention, line_no, key, v)?,
            _ => unreachable!(),
        }
    }
    cfg.model
        .validate()
        .map_err(|e| cfg_err(0, format!("model constraints: {e}")))?;
    cfg.train
        .validate()
        .map_err(|e| cfg_err(0, format!("train constraints: {e}")))?;
    cfg.loss
        .validate()
        .map_err(|e| cfg_err(0, format!("loss constraints: {e}")))?;
    // Re-derive head count in case dim/head_dim changed independently.
    cfg.attention = AttentionConfig::new(
        cfg.attention.dim,
        cfg.attention.head_dim,
        cfg.attention.eps,
        cfg.attention.scales.clone(),
    )
    .map_err(|e| cfg_err(0, format!("attention constraints: {e}")))?;
    Ok(cfg)
}

fn apply_model_key(m: &mut ModelConfig, line: usize, key: &str, v: &str) -> Result<()> {
    match key {
        "preset" => {
            *m = ModelConfig::by_name(v).map_err(|e| cfg_err(line, e.to_string()))?;
        }
        "name" => m.name = v.to_string(),
        "input_size" => m.input_size = parse_num(line, key, v)?,
        "stage_depths" => m.stage_depths = parse_five(line, key, v)?,
        "stage_widths" => m.stage_widths = parse_five(line, key, v)?,
        "stage_kinds" => {
            let kinds: Result<Vec<StageKind>> = v
                .split(',')
                .map(|t| StageKind::from_tag(t.trim()).map_err(|e| cfg_err(line, e.to_string())))
                .collect();
            m.stage_kinds = kinds?
                .try_into()
                .map_err(|_| cfg_err(line, "stage_kinds wants exactly 5 values"))?;
        }
        "neck_depth" => m.neck_depth = parse_num(line, key, v)?,
        "neck_width" => m.neck_width = parse_num(line, key, v)?,
        "embed_dim" => m.embed_dim = parse_num(line, key, v)?,
        "head_dim" => m.head_dim = parse_num(line, key, v)?,
        "attn_eps" => m.attn_eps = parse_num(line, key, v)?,
        "stage4_scales" => m.stage4_scales = parse_list(line, key, v)?,
        "stage5_scales" => m.stage5_scales = parse_list(line, key, v)?,
        other => return Err(cfg_err(line, format!("unknown key `{other}` in [model]"))),
    }
    Ok(())
}

fn apply_train_key(t: &mut TrainConfig, line: usize, key: &str, v: &str) -> Result<()> {
    match key {
        "epochs" => t.epochs = parse_num(line, key, v)?,
        "batch_size" => t.batch_size = parse_num(line, key, v)?,
        "lr_init" => t.lr_init = parse_num(line, key, v)?,
        "beta1" => t.beta1 = parse_num(line, key, v)?,
        "beta2" => t.beta2 = parse_num(line, key, v)?,
        "weight_decay" => t.weight_decay = parse_num(line, key, v)?,
        "max_masks_per_image" => t.max_masks_per_image = parse_num(line, key, v)?,
        "min_points" => t.min_points = parse_num(line, key, v)?,
        "max_points" => t.max_points = parse_num(line, key, v)?,
        "hflip_prob" => t.hflip_prob = parse_num(line, key, v)?,
        "seed" => t.seed = parse_num(line, key, v)?,
        other => return Err(cfg_err(line, format!("unknown key `{other}` in [train]"))),
    }
    Ok(())
}

fn apply_loss_key(l: &mut LossConfig, line: usize, key: &str, v: &str) -> Result<()> {
    match key {
        "focal_weight" => l.focal_weight = parse_num(line, key, v)?,
        "dice_weight" => l.dice_weight = parse_num(line, key, v)?,
        "focal_gamma" => l.focal_gamma = parse_num(line, key, v)?,
        "focal_alpha" => l.focal_alpha = parse_num(line, key, v)?,
        "dice_eps" => l.dice_eps = parse_num(line, key, v)?,
        "iou_weight" => l.iou_weight = parse_num(line, key, v)?,
        other => return Err(cfg_err(line, format!("unknown key `{other}` in [loss]"))),
    }
    Ok(())
}

fn apply_attention_key(a: &mut AttentionConfig, line: usize, key: &str, v: &str) -> Result<()> {
    match key {
        "dim" => a.dim = parse_num(line, key, v)?,
        "head_dim" => a.head_dim = parse_num(line, key, v)?,
        "eps" => a.eps = parse_num(line, key, v)?,
        "scales" => a.scales = parse_list(line, key, v)?,
        other => {
            return Err(cfg_err(
                line,
                format!("unknown key `{other}` in [attention]"),
            ))
        }
    }
    Ok(())
}

/// Serialize a model config as config-file text (used inside checkpoints).
pub fn format_model_config(m: &ModelConfig) -> String {
    let csv = |xs: &[usize]| {
        xs.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let kinds = m
        .stage_kinds
        .iter()
        .map(|k| k.tag().to_string())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "[model]\nname = {}\ninput_size = {}\nstage_depths = {}\nstage_widths = {}\n\
         stage_kinds = {}\nneck_depth = {}\nneck_width = {}\nembed_dim = {}\nhead_dim = {}\n\
         attn_eps = {}\nstage4_scales = {}\nstage5_scales = {}\n",
        m.name,
        m.input_size,
        csv(&m.stage_depths),
        csv(&m.stage_widths),
        kinds,
        m.neck_depth,
        m.neck_width,
        m.embed_dim,
        m.head_dim,
        m.attn_eps,
        csv(&m.stage4_scales),
        csv(&m.stage5_scales),
    )
}
