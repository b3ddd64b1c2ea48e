//! Prompt encoder and mask decoder.
//!
//! Points and boxes become embedding tokens: a random-Fourier positional
//! encoding of the normalized coordinates plus learned type embeddings. The
//! decoder appends three mask tokens and one quality token, runs two rounds
//! of bidirectional cross-attention between tokens and the image embedding
//! (plain softmax attention — this half is deliberately not linearized),
//! upsamples the embedding 4x through two transposed convolutions, and dots
//! each mask token's hypernetwork output against the upsampled map to form
//! three logit maps; the quality token predicts the three IoU scores through
//! a small MLP ending in a sigmoid.
//!
//! Foreground and background point embeddings are a single learned vector
//! with opposite signs, so training that only ever samples foreground points
//! still shapes the background direction.

use crate::attention::LN_EPS;
use crate::eval::MaskBitmap;
use crate::params::{init_linear, Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Value};
use crate::{Error, Result};

pub const MASK_TOKENS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointLabel {
    Foreground,
    Background,
}

/// Prompts driving one mask prediction. Point coordinates and box corners
/// live in input-space pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub points: Vec<(f32, f32, PointLabel)>,
    /// `(x0, y0, x1, y1)` with `x0 < x1`, `y0 < y1`.
    pub bbox: Option<(f32, f32, f32, f32)>,
}

impl PromptSet {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.points.is_empty() && self.bbox.is_none() {
            return Err(Error::Invalid("prompt set needs a point or a box".into()));
        }
        let s = image_size as f32;
        for &(x, y, _) in &self.points {
            if !(0.0..=s).contains(&x) || !(0.0..=s).contains(&y) {
                return Err(Error::Invalid(format!(
                    "point ({x}, {y}) outside the {image_size}-pixel image"
                )));
            }
        }
        if let Some((x0, y0, x1, y1)) = self.bbox {
            if !(x0 < x1 && y0 < y1) {
                return Err(Error::Invalid(format!(
                    "degenerate box ({x0}, {y0}, {x1}, {y1})"
                )));
            }
            for v in [x0, x1, y0, y1] {
                if !(0.0..=s).contains(&v) {
                    return Err(Error::Invalid(format!(
                        "box ({x0}, {y0}, {x1}, {y1}) outside the {image_size}-pixel image"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        self.points.len() + if self.bbox.is_some() { 2 } else { 0 }
    }
}

/// Three candidate masks with predicted quality scores.
#[derive(Clone, Debug)]
pub struct MaskPrediction {
    /// `[3, H_out, W_out]` logit maps.
    pub logits: Tensor,
    /// Predicted IoU per mask, in `[0, 1]`.
    pub iou_scores: [f32; 3],
}

impl MaskPrediction {
    pub fn mask_side(&self) -> usize {
        self.logits.shape()[1]
    }
}

/// Inference-time selection: argmax of the predicted IoU scores (lowest
/// index wins ties), binarized at logit 0.
pub fn select_best_mask(pred: &MaskPrediction) -> (usize, MaskBitmap) {
    let mut best = 0usize;
    for i in 1..MASK_TOKENS {
        if pred.iou_scores[i] > pred.iou_scores[best] {
            best = i;
        }
    }
    let side = pred.mask_side();
    let hw = side * side;
    let bits = pred.logits.data()[best * hw..(best + 1) * hw]
        .iter()
        .map(|&v| (v > 0.0) as u8)
        .collect();
    (
        best,
        MaskBitmap::from_bits(side, side, bits).expect("logit map is rectangular"),
    )
}

// ── Prompt encoder ──────────────────────────────────────────────────

pub struct PromptEncoderParams {
    /// `[2, C/2]` Gaussian frequencies, fixed at model creation by seed and
    /// saved with the checkpoint (non-trainable).
    pub pe_freq: ParamId,
    /// `[1, C]` point-type embedding; foreground adds it, background
    /// subtracts it.
    pub point_emb: ParamId,
    /// `[2, C]` corner-type embeddings for the two box corners.
    pub corner_emb: ParamId,
}

impl PromptEncoderParams {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, embed_dim: usize) -> Result<Self> {
        if embed_dim % 4 != 0 {
            return Err(Error::Invalid(format!(
                "embed_dim {embed_dim} must be divisible by 4"
            )));
        }
        let half = embed_dim / 2;
        Ok(PromptEncoderParams {
            pe_freq: store.add(
                "prompt.pe_freq",
                Tensor::from_fn(&[2, half], |_| rng.next_gaussian()),
                false,
            ),
            point_emb: store.add(
                "prompt.point_emb",
                init_linear(rng, &[1, embed_dim]),
                true,
            ),
            corner_emb: store.add(
                "prompt.corner_emb",
                init_linear(rng, &[2, embed_dim]),
                true,
            ),
        })
    }
}

/// Random-Fourier features of a normalized coordinate pair:
/// `[sin(2 pi f_j . u) .. cos(2 pi f_j . u) ..]`, length `C`.
fn fourier_features(freq: &Tensor, u: f32, v: f32) -> Vec<f32> {
    let half = freq.shape()[1];
    let mut out = vec![0.0f32; 2 * half];
    for j in 0..half {
        let phase = 2.0 * std::f32::consts::PI * (freq.data()[j] * u + freq.data()[half + j] * v);
        out[j] = phase.sin();
        out[half + j] = phase.cos();
    }
    out
}

/// Positional encoding of a pixel coordinate, as a constant on the tape.
fn encode_position<'t>(
    ctx: &Ctx<'t, '_>,
    p: &PromptEncoderParams,
    x: f32,
    y: f32,
    image_size: usize,
) -> Result<Value<'t>> {
    let freq = ctx.store().get(p.pe_freq);
    let feats = fourier_features(freq, x / image_size as f32, y / image_size as f32);
    let c = feats.len();
    ctx.konst(&Tensor::from_vec(&[1, c], feats)?)
}

/// Encode labeled points into `[n_pts, C]` tokens.
pub fn encode_points<'t>(
    ctx: &Ctx<'t, '_>,
    p: &PromptEncoderParams,
    points: &[(f32, f32, PointLabel)],
    image_size: usize,
) -> Result<Value<'t>> {
    if points.is_empty() {
        return Err(Error::Invalid("encode_points needs at least one point".into()));
    }
    let s = image_size as f32;
    let mut rows = Vec::with_capacity(points.len());
    for &(x, y, label) in points {
        if !(0.0..=s).contains(&x) || !(0.0..=s).contains(&y) {
            return Err(Error::Invalid(format!(
                "point ({x}, {y}) outside the {image_size}-pixel image"
            )));
        }
        let pe = encode_position(ctx, p, x, y, image_size)?;
        let emb = ctx.p(p.point_emb)?;
        let tok = match label {
            PointLabel::Foreground => pe.add(emb)?,
            PointLabel::Background => pe.sub(emb)?,
        };
        rows.push(tok);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        ctx.tape().concat2(&rows, 0)
    }
}

/// Encode a box as its two corner points plus corner-type embeddings,
/// `[2, C]`.
pub fn encode_box<'t>(
    ctx: &Ctx<'t, '_>,
    p: &PromptEncoderParams,
    bbox: (f32, f32, f32, f32),
    image_size: usize,
) -> Result<Value<'t>> {
    let (x0, y0, x1, y1) = bbox;
    if !(x0 < x1 && y0 < y1) {
        return Err(Error::Invalid(format!(
            "degenerate box ({x0}, {y0}, {x1}, {y1})"
        )));
    }
    let s = image_size as f32;
    for v in [x0, x1, y0, y1] {
        if !(0.0..=s).contains(&v) {
            return Err(Error::Invalid(format!(
                "box ({x0}, {y0}, {x1}, {y1}) outside the {image_size}-pixel image"
            )));
        }
    }
    let corners = ctx.tape().concat2(
        &[
            encode_position(ctx, p, x0, y0, image_size)?,
            encode_position(ctx, p, x1, y1, image_size)?,
        ],
        0,
    )?;
    corners.add(ctx.p(p.corner_emb)?)
}

/// Encode a full prompt set into `[P, C]` tokens (points first, then box
/// corners).
pub fn encode_prompts<'t>(
    ctx: &Ctx<'t, '_>,
    p: &PromptEncoderParams,
    prompts: &PromptSet,
    image_size: usize,
) -> Result<Value<'t>> {
    prompts.validate(image_size)?;
    let mut parts = Vec::new();
    if !struct_points_empty(prompts) {
        parts.push(encode_points(ctx, p, &prompts.points, image_size)?);
    }
    if let Some(bbox) = prompts.bbox {
        parts.push(encode_box(ctx, p, bbox, image_size)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        ctx.tape().concat2(&parts, 0)
    }
}

fn struct_points_empty(prompts: &PromptSet) -> bool {
    prompts.points.is_empty()
}

// ── Mask decoder ────────────────────────────────────────────────────

struct LinearParams {
    w: ParamId,
    b: ParamId,
}

impl LinearParams {
    fn init(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize) -> Self {
        LinearParams {
            w: store.add(format!("{name}.w"), init_linear(rng, &[cin, cout]), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, cout]), true),
        }
    }

    fn init_zero(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        LinearParams {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[cin, cout]), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, cout]), true),
        }
    }

    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: Value<'t>) -> Result<Value<'t>> {
        x.matmul(ctx.p(self.w)?)?.add(ctx.p(self.b)?)
    }
}

struct AttentionLayer {
    wq: LinearParams,
    wk: LinearParams,
    wv: LinearParams,
    wo: LinearParams,
    norm_scale: ParamId,
    norm_shift: ParamId,
}

impl AttentionLayer {
    fn init(store: &mut ParamStore, rng: &mut Rng, name: &str, c: usize) -> Self {
        AttentionLayer {
            wq: LinearParams::init(store, rng, &format!("{name}.q"), c, c),
            wk: LinearParams::init(store, rng, &format!("{name}.k"), c, c),
            wv: LinearParams::init(store, rng, &format!("{name}.v"), c, c),
            wo: LinearParams::init(store, rng, &format!("{name}.o"), c, c),
            norm_scale: store.add(format!("{name}.norm.scale"), Tensor::full(&[c], 1.0), true),
            norm_shift: store.add(format!("{name}.norm.shift"), Tensor::zeros(&[c]), true),
        }
    }

    /// Post-norm residual attention: `ln(x + attn(q_src -> kv_src))`.
    fn apply<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        q_src: Value<'t>,
        kv_src: Value<'t>,
        heads: usize,
    ) -> Result<Value<'t>> {
        let q = self.wq.apply(ctx, q_src)?;
        let k = self.wk.apply(ctx, kv_src)?;
        let v = self.wv.apply(ctx, kv_src)?;
        let c = q.shape()[1];
        let head_dim = c / heads;
        let scale = 1.0 / (head_dim as f32).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = q.slice2(1, lo, hi)?;
            let kh = k.slice2(1, lo, hi)?;
            let vh = v.slice2(1, lo, hi)?;
            let scores = qh.matmul(kh.transpose2()?)?.mul_scalar(scale)?;
            outs.push(scores.softmax_last()?.matmul(vh)?);
        }
        let merged = ctx.tape().concat2(&outs, 1)?;
        let attended = self.wo.apply(ctx, merged)?;
        q_src
            .add(attended)?
            .layernorm(ctx.p(self.norm_scale)?, ctx.p(self.norm_shift)?, LN_EPS, 1)
    }
}

struct DecoderRound {
    token_self: AttentionLayer,
    token_to_image: AttentionLayer,
    mlp1: LinearParams,
    mlp2: LinearParams,
    mlp_norm_scale: ParamId,
    mlp_norm_shift: ParamId,
    image_to_token: AttentionLayer,
}

struct Mlp3 {
    l1: LinearParams,
    l2: LinearParams,
    l3: LinearParams,
}

impl Mlp3 {
    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: Value<'t>) -> Result<Value<'t>> {
        let h = self.l1.apply(ctx, x)?.relu()?;
        let h = self.l2.apply(ctx, h)?.relu()?;
        self.l3.apply(ctx, h)
    }
}

pub struct MaskDecoderParams {
    /// `[3, C]` learned mask tokens and `[1, C]` quality token.
    mask_tokens: ParamId,
    iou_token: ParamId,
    rounds: Vec<DecoderRound>,
    final_token_to_image: AttentionLayer,
    /// Upscaling: `[C, C/2, 2, 2]` and `[C/2, C/4, 2, 2]` transposed convs
    /// with a channel layer norm between them.
    up1_w: ParamId,
    up_norm_scale: ParamId,
    up_norm_shift: ParamId,
    up2_w: ParamId,
    /// Per-mask hypernetworks `C -> C -> C/4`; final layers zero-initialized
    /// so a fresh decoder emits all-zero logits.
    hyper: Vec<Mlp3>,
    /// Quality head `C -> C -> 3`, zero-initialized final layer: sigmoid(0)
    /// gives 0.5 scores at init.
    iou_head: Mlp3,
    heads: usize,
    pub rounds_count: usize,
}

pub const DECODER_ROUNDS: usize = 2;

impl MaskDecoderParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        embed_dim: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if embed_dim % 4 != 0 || embed_dim % head_dim != 0 {
            return Err(Error::Invalid(format!(
                "decoder width {embed_dim} must divide by 4 and by head_dim {head_dim}"
            )));
        }
        let c = embed_dim;
        let rounds = (0..DECODER_ROUNDS)
            .map(|r| {
                let name = format!("dec.r{r}");
                DecoderRound {
                    token_self: AttentionLayer::init(store, rng, &format!("{name}.self"), c),
                    token_to_image: AttentionLayer::init(store, rng, &format!("{name}.t2i"), c),
                    mlp1: LinearParams::init(store, rng, &format!("{name}.mlp1"), c, 2 * c),
                    mlp2: LinearParams::init(store, rng, &format!("{name}.mlp2"), 2 * c, c),
                    mlp_norm_scale: store.add(
                        format!("{name}.mlp_norm.scale"),
                        Tensor::full(&[c], 1.0),
                        true,
                    ),
                    mlp_norm_shift: store.add(
                        format!("{name}.mlp_norm.shift"),
                        Tensor::zeros(&[c]),
                        true,
                    ),
                    image_to_token: AttentionLayer::init(store, rng, &format!("{name}.i2t"), c),
                }
            })
            .collect();
        Ok(MaskDecoderParams {
            mask_tokens: store.add("dec.mask_tokens", init_linear(rng, &[3, c]), true),
            iou_token: store.add("dec.iou_token", init_linear(rng, &[1, c]), true),
            rounds,
            final_token_to_image: AttentionLayer::init(store, rng, "dec.final_t2i", c),
            up1_w: store.add(
                "dec.up1.w",
                Tensor::from_fn(&[c, c / 2, 2, 2], |_| {
                    rng.next_gaussian() * (1.0 / c as f32).sqrt()
                }),
                true,
            ),
            up_norm_scale: store.add("dec.up_norm.scale", Tensor::full(&[c / 2], 1.0), true),
            up_norm_shift: store.add("dec.up_norm.shift", Tensor::zeros(&[c / 2]), true),
            up2_w: store.add(
                "dec.up2.w",
                Tensor::from_fn(&[c / 2, c / 4, 2, 2], |_| {
                    rng.next_gaussian() * (2.0 / c as f32).sqrt()
                }),
                true,
            ),
            hyper: (0..MASK_TOKENS)
                .map(|i| Mlp3 {
                    l1: LinearParams::init(store, rng, &format!("dec.hyper{i}.l1"), c, c),
                    l2: LinearParams::init(store, rng, &format!("dec.hyper{i}.l2"), c, c),
                    l3: LinearParams::init_zero(store, &format!("dec.hyper{i}.l3"), c, c / 4),
                })
                .collect(),
            iou_head: Mlp3 {
                l1: LinearParams::init(store, rng, "dec.iou.l1", c, c),
                l2: LinearParams::init(store, rng, "dec.iou.l2", c, c),
                l3: LinearParams::init_zero(store, "dec.iou.l3", c, 3),
            },
            heads: embed_dim / head_dim,
            rounds_count: DECODER_ROUNDS,
        })
    }
}

/// Decoder output still on the tape, for training.
pub struct DecodeValues<'t> {
    /// `[3, 4h, 4w]` logits.
    pub logits: Value<'t>,
    /// `[1, 3]` scores in (0, 1).
    pub iou: Value<'t>,
}

/// Run the decoder against an image embedding `[C, h, w]` and encoded prompt
/// tokens `[P, C]` (P >= 1).
pub fn mask_decode<'t>(
    ctx: &Ctx<'t, '_>,
    p: &MaskDecoderParams,
    prompt_enc: &PromptEncoderParams,
    embedding: Value<'t>,
    prompt_tokens: Value<'t>,
    image_size: usize,
) -> Result<DecodeValues<'t>> {
    let eshape = embedding.shape();
    if eshape.len() != 3 {
        return Err(Error::Shape(format!(
            "mask_decode wants a [C, h, w] embedding, got {eshape:?}"
        )));
    }
    let (c, h, w) = (eshape[0], eshape[1], eshape[2]);
    let tshape = prompt_tokens.shape();
    if tshape.len() != 2 || tshape[1] != c || tshape[0] == 0 {
        return Err(Error::Shape(format!(
            "prompt tokens want [P>=1, {c}], got {tshape:?}"
        )));
    }

    // Image tokens with a dense positional encoding over grid-cell centers.
    let freq = ctx.store().get(prompt_enc.pe_freq).clone();
    let mut pe = vec![0.0f32; h * w * c];
    for gy in 0..h {
        for gx in 0..w {
            let u = (gx as f32 + 0.5) / w as f32 * image_size as f32;
            let v = (gy as f32 + 0.5) / h as f32 * image_size as f32;
            let feats = fourier_features(&freq, u / image_size as f32, v / image_size as f32);
            pe[(gy * w + gx) * c..(gy * w + gx + 1) * c].copy_from_slice(&feats);
        }
    }
    let pe = ctx.konst(&Tensor::from_vec(&[h * w, c], pe)?)?;
    let mut img = embedding.reshape(&[c, h * w])?.transpose2()?.add(pe)?;

    let mut tokens = ctx.tape().concat2(
        &[ctx.p(p.mask_tokens)?, ctx.p(p.iou_token)?, prompt_tokens],
        0,
    )?;
    for round in &p.rounds {
        tokens = round.token_self.apply(ctx, tokens, tokens, p.heads)?;
        tokens = round.token_to_image.apply(ctx, tokens, img, p.heads)?;
        let mlp = round.mlp2.apply(ctx, round.mlp1.apply(ctx, tokens)?.relu()?)?;
        tokens = tokens.add(mlp)?.layernorm(
            ctx.p(round.mlp_norm_scale)?,
            ctx.p(round.mlp_norm_shift)?,
            LN_EPS,
            1,
        )?;
        img = round.image_to_token.apply(ctx, img, tokens, p.heads)?;
    }
    let tokens = p.final_token_to_image.apply(ctx, tokens, img, p.heads)?;

    // Upscale the (token-refined) embedding 4x.
    let emb_map = img.transpose2()?.reshape(&[c, h, w])?;
    let up = emb_map
        .conv_transpose2x(ctx.p(p.up1_w)?)?
        .layernorm(ctx.p(p.up_norm_scale)?, ctx.p(p.up_norm_shift)?, LN_EPS, 0)?
        .relu()?
        .conv_transpose2x(ctx.p(p.up2_w)?)?
        .relu()?; // [C/4, 4h, 4w]

    // Hypernetwork dot products form the logit maps.
    let mut hyper_rows = Vec::with_capacity(MASK_TOKENS);
    for (i, mlp) in p.hyper.iter().enumerate() {
        let tok = tokens.slice2(0, i, i + 1)?;
        hyper_rows.push(mlp.apply(ctx, tok)?);
    }
    let hypers = ctx.tape().concat2(&hyper_rows, 0)?; // [3, C/4]
    let flat = up.reshape(&[c / 4, 4 * h * 4 * w])?;
    let logits = hypers.matmul(flat)?.reshape(&[MASK_TOKENS, 4 * h, 4 * w])?;

    let iou_tok = tokens.slice2(0, MASK_TOKENS, MASK_TOKENS + 1)?;
    let iou = p.iou_head.apply(ctx, iou_tok)?.sigmoid()?;
    Ok(DecodeValues { logits, iou })
}

/// Read a finished prediction out of the tape.
pub fn read_prediction(tape: &Tape, values: &DecodeValues<'_>) -> MaskPrediction {
    let logits = tape.tensor(values.logits);
    let iou = tape.tensor(values.iou);
    let mut iou_scores = [0.0f32; 3];
    for (dst, &src) in iou_scores.iter_mut().zip(iou.data()) {
        *dst = src.clamp(0.0, 1.0);
    }
    MaskPrediction { logits, iou_scores }
}
