//! Analytic efficiency accounting and wall-clock measurement.
//!
//! Counting conventions, chosen to match common FLOPs-counter practice:
//! one multiply-accumulate = 1 MAC; normalizations, activations, residual
//! adds, positional encodings and up/down-sampling count 0 MACs (their
//! parameters are still counted). Convolutions are counted at the
//! resolution actually computed: stride-2 blocks run their convolution at
//! full resolution before the exact subsample. Attention is counted by its
//! dominant matmul terms only — fast path `2 N d^2`, quadratic reference
//! `2 N^2 d` — so the crossover inequality is exactly `d < N`.
//!
//! Parameter counts are exact element counts, including biases, norm affine
//! parameters, frozen running statistics and positional frequencies: the
//! totals equal the checkpoint tensor-element sum.

use std::time::Instant;

use crate::backbone::{ModelConfig, StageKind};
use crate::model::Model;
use crate::samhead::PromptSet;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub rows: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub input_size: usize,
}

impl CostReport {
    fn from_rows(rows: Vec<LayerCost>, input_size: usize) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs = rows.iter().map(|r| r.macs).sum();
        CostReport {
            rows,
            total_params,
            total_macs,
            input_size,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,kind,params,macs\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.name, r.kind, r.params, r.macs));
        }
        out.push_str(&format!(
            "total,,{},{}\n",
            self.total_params, self.total_macs
        ));
        out
    }

    pub fn to_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(5);
        let mut out = format!(
            "{:<name_w$}  {:<12}  {:>12}  {:>14}\n",
            "layer", "kind", "params", "macs"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<name_w$}  {:<12}  {:>12}  {:>14}\n",
                r.name, r.kind, r.params, r.macs
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:<12}  {:>12}  {:>14}\n",
            "total", "", self.total_params, self.total_macs
        ));
        out
    }
}

// ── Closed-form per-layer costs ─────────────────────────────────────

pub fn conv_params(cout: usize, cin_per_group: usize, k: usize, bias: bool) -> u64 {
    (cout * cin_per_group * k * k + if bias { cout } else { 0 }) as u64
}

pub fn conv_macs(cout: usize, cin_per_group: usize, k: usize, ho: usize, wo: usize) -> u64 {
    (cout * cin_per_group * k * k * ho * wo) as u64
}

pub fn linear_params(cin: usize, cout: usize, bias: bool) -> u64 {
    (cin * cout + if bias { cout } else { 0 }) as u64
}

pub fn linear_macs(cin: usize, cout: usize, tokens: usize) -> u64 {
    (cin * cout * tokens) as u64
}

/// Dominant-term cost of the reordered linear attention on `n` tokens of
/// width `d`: the `d x d` summary plus its application.
pub fn linear_attention_fast_macs(n: usize, d: usize) -> u64 {
    2 * (n as u64) * (d as u64) * (d as u64)
}

/// Dominant-term cost of the explicit quadratic form.
pub fn linear_attention_quadratic_macs(n: usize, d: usize) -> u64 {
    2 * (n as u64) * (n as u64) * (d as u64)
}

const BN_PARAMS_PER_CH: usize = 4; // mean, var, scale, shift
const LN_PARAMS_PER_CH: usize = 2;

struct Counter {
    rows: Vec<LayerCost>,
}

impl Counter {
    fn push(&mut self, name: String, kind: &'static str, params: u64, macs: u64) {
        self.rows.push(LayerCost {
            name,
            kind,
            params,
            macs,
        });
    }

    fn conv_norm(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        side_in: usize,
    ) {
        // Stride-1 convolution at the input resolution (stride-2 variants
        // subsample afterwards), then batch norm.
        self.push(
            format!("{name}.conv"),
            "conv",
            conv_params(cout, cin, k, false),
            conv_macs(cout, cin, k, side_in, side_in),
        );
        self.push(
            format!("{name}.bn"),
            "norm",
            (cout * BN_PARAMS_PER_CH) as u64,
            0,
        );
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, stride: usize, side_in: usize) {
        let side_out = side_in / stride;
        self.conv_norm(&format!("{name}.conv1"), cin, cout, 3, side_in);
        self.conv_norm(&format!("{name}.conv2"), cout, cout, 3, side_out);
        if stride != 1 || cin != cout {
            self.conv_norm(&format!("{name}.shortcut"), cin, cout, 1, side_in);
        }
    }

    fn fused_mbconv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        ratio: usize,
        stride: usize,
        side_in: usize,
    ) {
        let side_out = side_in / stride;
        self.conv_norm(&format!("{name}.expand"), cin, cin * ratio, 3, side_in);
        self.conv_norm(&format!("{name}.project"), cin * ratio, cout, 1, side_out);
    }

    fn evit_block(&mut self, name: &str, cfg: &ModelConfig, stage: usize, side: usize) {
        let d = cfg.stage_widths[stage];
        let scales = if stage == 3 {
            &cfg.stage4_scales
        } else {
            &cfg.stage5_scales
        };
        let groups = 1 + scales.len();
        let n = side * side;
        self.push(
            format!("{name}.attn_norm"),
            "norm",
            (d * LN_PARAMS_PER_CH) as u64,
            0,
        );
        self.push(
            format!("{name}.qkv"),
            "conv",
            conv_params(3 * d, d, 1, false),
            conv_macs(3 * d, d, 1, side, side),
        );
        for (i, &s) in scales.iter().enumerate() {
            self.push(
                format!("{name}.agg{i}"),
                "dwconv",
                conv_params(3 * d, 1, s, false),
                conv_macs(3 * d, 1, s, side, side),
            );
        }
        let heads = d / cfg.head_dim;
        self.push(
            format!("{name}.attention"),
            "lin-attn",
            0,
            (groups * heads) as u64 * linear_attention_fast_macs(n, cfg.head_dim),
        );
        self.push(
            format!("{name}.proj"),
            "conv",
            conv_params(d, d * groups, 1, false),
            conv_macs(d, d * groups, 1, side, side),
        );
        self.push(
            format!("{name}.ffn_norm"),
            "norm",
            (d * LN_PARAMS_PER_CH) as u64,
            0,
        );
        let e = d * crate::attention::FFN_EXPAND;
        self.push(
            format!("{name}.ffn_expand"),
            "conv",
            conv_params(e, d, 1, false),
            conv_macs(e, d, 1, side, side),
        );
        self.push(
            format!("{name}.ffn_dw"),
            "dwconv",
            conv_params(e, 1, 3, false),
            conv_macs(e, 1, 3, side, side),
        );
        self.push(
            format!("{name}.ffn_proj"),
            "conv",
            conv_params(d, e, 1, false),
            conv_macs(d, e, 1, side, side),
        );
    }

    fn attention_layer(&mut self, name: &str, c: usize, tq: usize, tkv: usize) {
        let proj_params = 4 * linear_params(c, c, true);
        let proj_macs = linear_macs(c, c, tq) // queries
            + 2 * linear_macs(c, c, tkv)      // keys and values
            + linear_macs(c, c, tq); // output
        let scores = 2 * (tq * tkv * c) as u64; // QK^T and the weighted sum
        self.push(
            format!("{name}.proj"),
            "linear",
            proj_params,
            proj_macs,
        );
        self.push(format!("{name}.scores"), "attn", 0, scores);
        self.push(
            format!("{name}.norm"),
            "norm",
            (c * LN_PARAMS_PER_CH) as u64,
            0,
        );
    }
}

/// Closed-form cost of the full model (encoder, prompt encoder, decoder) at
/// the given input size, with a single box prompt for the decoder half.
pub fn count_macs(cfg: &ModelConfig, input_size: usize) -> Result<CostReport> {
    let mut cfg = cfg.clone();
    cfg.input_size = input_size;
    cfg.validate()?;
    let mut c = Counter { rows: Vec::new() };

    // Stem at stride 2: conv computed at full resolution.
    c.conv_norm("enc.stem", 3, cfg.stage_widths[0], 3, input_size);
    let mut side = input_size / 2;
    for s in 0..5 {
        let cin = if s == 0 {
            cfg.stage_widths[0]
        } else {
            cfg.stage_widths[s - 1]
        };
        let cout = cfg.stage_widths[s];
        for b in 0..cfg.stage_depths[s] {
            let name = format!("enc.s{}.b{b}", s + 1);
            let (bin, stride) = if b == 0 { (cin, 2) } else { (cout, 1) };
            let side_in = if b == 0 { side } else { side / 2 };
            match cfg.stage_kinds[s] {
                StageKind::Res => c.res_block(&name, bin, cout, stride, side_in),
                StageKind::FMbConv => c.fused_mbconv(
                    &name,
                    bin,
                    cout,
                    crate::attention::FFN_EXPAND,
                    stride,
                    side_in,
                ),
                StageKind::Evit => {
                    if b == 0 {
                        c.fused_mbconv(
                            &name,
                            bin,
                            cout,
                            crate::attention::FFN_EXPAND,
                            stride,
                            side_in,
                        );
                    } else {
                        c.evit_block(&name, &cfg, s, side_in);
                    }
                }
            }
        }
        side /= 2;
    }
    // side is now input/64; fusion happens at stage-3 resolution input/16.
    let s3 = input_size / 16;
    let s4 = input_size / 32;
    let s5 = input_size / 64;
    c.conv_norm("enc.fuse.p3", cfg.stage_widths[2], cfg.neck_width, 1, s3);
    c.conv_norm("enc.fuse.p4", cfg.stage_widths[3], cfg.neck_width, 1, s4);
    c.conv_norm("enc.fuse.p5", cfg.stage_widths[4], cfg.neck_width, 1, s5);
    for i in 0..cfg.neck_depth {
        c.fused_mbconv(
            &format!("enc.neck.b{i}"),
            cfg.neck_width,
            cfg.neck_width,
            crate::attention::FFN_EXPAND,
            1,
            s3,
        );
    }
    c.push(
        "enc.out".into(),
        "conv",
        conv_params(cfg.embed_dim, cfg.neck_width, 1, true),
        conv_macs(cfg.embed_dim, cfg.neck_width, 1, s3, s3),
    );

    // Prompt encoder parameters (positional encodings cost 0 MACs by the
    // stated convention).
    let cd = cfg.embed_dim;
    c.push("prompt.pe_freq".into(), "pe", cd as u64, 0);
    c.push("prompt.point_emb".into(), "embedding", cd as u64, 0);
    c.push("prompt.corner_emb".into(), "embedding", 2 * cd as u64, 0);

    // Decoder with one box prompt: 3 mask tokens + 1 quality token + 2
    // corner tokens against h*w image tokens.
    let t = 6usize;
    let n_img = s3 * s3;
    c.push("dec.mask_tokens".into(), "embedding", (3 * cd) as u64, 0);
    c.push("dec.iou_token".into(), "embedding", cd as u64, 0);
    for r in 0..crate::samhead::DECODER_ROUNDS {
        let name = format!("dec.r{r}");
        c.attention_layer(&format!("{name}.self"), cd, t, t);
        c.attention_layer(&format!("{name}.t2i"), cd, t, n_img);
        c.push(
            format!("{name}.mlp"),
            "linear",
            linear_params(cd, 2 * cd, true) + linear_params(2 * cd, cd, true),
            linear_macs(cd, 2 * cd, t) + linear_macs(2 * cd, cd, t),
        );
        c.push(
            format!("{name}.mlp_norm"),
            "norm",
            (cd * LN_PARAMS_PER_CH) as u64,
            0,
        );
        c.attention_layer(&format!("{name}.i2t"), cd, n_img, t);
    }
    c.attention_layer("dec.final_t2i", cd, t, n_img);
    c.push(
        "dec.up1".into(),
        "convT",
        (cd * (cd / 2) * 4) as u64,
        (cd * (cd / 2) * 4 * n_img) as u64,
    );
    c.push(
        "dec.up_norm".into(),
        "norm",
        ((cd / 2) * LN_PARAMS_PER_CH) as u64,
        0,
    );
    c.push(
        "dec.up2".into(),
        "convT",
        ((cd / 2) * (cd / 4) * 4) as u64,
        ((cd / 2) * (cd / 4) * 4 * 4 * n_img) as u64,
    );
    for i in 0..3 {
        c.push(
            format!("dec.hyper{i}"),
            "linear",
            linear_params(cd, cd, true) + linear_params(cd, cd, true)
                + linear_params(cd, cd / 4, true),
            linear_macs(cd, cd, 1) + linear_macs(cd, cd, 1) + linear_macs(cd, cd / 4, 1),
        );
    }
    c.push(
        "dec.logits".into(),
        "matmul",
        0,
        (3 * (cd / 4) * 16 * n_img) as u64,
    );
    c.push(
        "dec.iou_head".into(),
        "linear",
        2 * linear_params(cd, cd, true) + linear_params(cd, 3, true),
        2 * linear_macs(cd, cd, 1) + linear_macs(cd, 3, 1),
    );
    Ok(CostReport::from_rows(c.rows, input_size))
}

/// Exact parameter counts (a view over the same enumeration).
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    count_macs(cfg, cfg.input_size)
}

// ── Wall-clock measurement ──────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TimingReport {
    pub median_ms: f64,
    pub mad_ms: f64,
    pub images_per_s: f64,
    pub samples_ms: Vec<f64>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn summarize(mut samples: Vec<f64>) -> TimingReport {
    let med = median(&mut samples.clone());
    let mut dev: Vec<f64> = samples.iter().map(|s| (s - med).abs()).collect();
    let mad = median(&mut dev);
    TimingReport {
        median_ms: med,
        mad_ms: mad,
        images_per_s: 1000.0 / med,
        samples_ms: {
            samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
            samples
        },
    }
}

/// Median single-image forward latency (encoder plus decoder with one box
/// prompt) over `reps` runs after `warmup` discarded runs. Monotonic clock,
/// single-threaded.
pub fn time_forward(model: &Model, warmup: usize, reps: usize) -> Result<TimingReport> {
    if warmup < 1 || reps < 5 {
        return Err(Error::Invalid("time_forward wants warmup >= 1, reps >= 5".into()));
    }
    let s = model.config.input_size;
    let image = Tensor::from_fn(&[3, s, s], |i| ((i * 2654435761) % 997) as f32 / 997.0);
    let q = s as f32 / 4.0;
    let prompts = PromptSet {
        points: vec![],
        bbox: Some((q, q, 3.0 * q, 3.0 * q)),
    };
    let run = || -> Result<f64> {
        let t0 = Instant::now();
        let emb = model.embed_image(&image)?;
        let _ = model.decode_prompts(&emb, &prompts)?;
        Ok(t0.elapsed().as_secs_f64() * 1000.0)
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        samples.push(run()?);
    }
    Ok(summarize(samples))
}

/// Which attention form to time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionForm {
    Fast,
    Quadratic,
}

/// Median latency of one attention evaluation on `n x d` random tokens.
pub fn time_attention(
    form: AttentionForm,
    n: usize,
    d: usize,
    warmup: usize,
    reps: usize,
) -> Result<TimingReport> {
    if warmup < 1 || reps < 5 {
        return Err(Error::Invalid("time_attention wants warmup >= 1, reps >= 5".into()));
    }
    let mut rng = crate::rng::Rng::new(0xbe9c);
    let q = Tensor::from_fn(&[n, d], |_| rng.next_f32() * 2.0 - 1.0);
    let k = Tensor::from_fn(&[n, d], |_| rng.next_f32() * 2.0 - 1.0);
    let v = Tensor::from_fn(&[n, d], |_| rng.next_f32() * 2.0 - 1.0);
    let run = || -> Result<f64> {
        let t0 = Instant::now();
        let out = match form {
            AttentionForm::Fast => crate::attention::relu_linear_attention_fast(&q, &k, &v, 1e-6)?,
            AttentionForm::Quadratic => {
                crate::attention::relu_linear_attention_quadratic(&q, &k, &v, 1e-6)?
            }
        };
        let elapsed = t0.elapsed().as_secs_f64() * 1000.0;
        std::hint::black_box(out.data()[0]);
        Ok(elapsed)
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        samples.push(run()?);
    }
    Ok(summarize(samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;

    #[test]
    fn spec_formula_examples() {
        // single 3x3 conv, 3 -> 16 channels, 32x32 output
        assert_eq!(conv_macs(16, 3, 3, 32, 32), 442_368);
        assert_eq!(conv_params(16, 3, 3, true), 448);
        // linear 128 -> 64
        assert_eq!(linear_params(128, 64, false), 8192);
        assert_eq!(linear_params(128, 64, true), 8192 + 64);
        assert_eq!(linear_macs(128, 64, 1), 8192);
        // layer norm over 64 channels
        assert_eq!((64 * LN_PARAMS_PER_CH) as u64, 128);
    }

    #[test]
    fn params_equal_checkpoint_element_totals_exactly() {
        for cfg in [ModelConfig::desk(), ModelConfig::desk_large()] {
            let model = Model::new(cfg.clone(), 1).unwrap();
            let report = count_params(&cfg).unwrap();
            assert_eq!(
                report.total_params,
                model.store.total_elements() as u64,
                "{}: analytic count vs actual store",
                cfg.name
            );
        }
    }

    #[test]
    fn fast_quadratic_crossover_is_exactly_d_less_than_n() {
        for n in [1usize, 2, 4, 16, 64, 1024] {
            for d in [1usize, 2, 8, 16, 64, 1024] {
                let fast = linear_attention_fast_macs(n, d);
                let quad = linear_attention_quadratic_macs(n, d);
                // 2 n d^2 < 2 n^2 d  <=>  d < n
                assert_eq!(fast < quad, d < n, "n={n} d={d}");
                if d == n {
                    assert_eq!(fast, quad);
                }
            }
        }
    }

    #[test]
    fn totals_are_column_sums_and_order_invariant() {
        let report = count_macs(&ModelConfig::desk(), 128).unwrap();
        let p: u64 = report.rows.iter().map(|r| r.params).sum();
        let m: u64 = report.rows.iter().map(|r| r.macs).sum();
        assert_eq!(p, report.total_params);
        assert_eq!(m, report.total_macs);
        let p_rev: u64 = report.rows.iter().rev().map(|r| r.params).sum();
        assert_eq!(p_rev, report.total_params, "integer sums ignore order");
    }

    #[test]
    fn csv_and_table_render() {
        let report = count_macs(&ModelConfig::desk(), 128).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("name,kind,params,macs\n"));
        assert!(csv.trim_end().ends_with(&format!(
            "total,,{},{}",
            report.total_params, report.total_macs
        )));
        assert!(report.to_table().contains("layer"));
    }

    #[test]
    fn timing_reports_have_the_right_shape() {
        // Take the median of 5 on a trivially small attention problem.
        let rep = time_attention(AttentionForm::Fast, 64, 8, 1, 5).unwrap();
        assert_eq!(rep.samples_ms.len(), 5);
        // median of a sorted 5-sample vector is the 3rd order statistic
        assert_eq!(rep.median_ms, rep.samples_ms[2]);
        assert!(rep.images_per_s > 0.0);
        assert!(time_attention(AttentionForm::Fast, 8, 8, 0, 5).is_err());
        assert!(time_attention(AttentionForm::Fast, 8, 8, 1, 4).is_err());
    }
}
