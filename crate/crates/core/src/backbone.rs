//! Five-stage image encoder: a stride-2 stem, convolutional early stages,
//! attention-block late stages, fusion of the last three stages by
//! upsampling and addition, and a fused-MBConv neck.
//!
//! Spatial layout: the stem halves the input once and each stage halves it
//! again, so stages 1..5 sit at strides 4, 8, 16, 32 and 64. Stage-4 and
//! stage-5 features are projected and upsampled x2 / x4 onto the stage-3
//! grid, which puts the fused feature — and the final embedding — at stride
//! 16 (a 1024 input yields a 64x64 embedding).
//!
//! Normalization is batch-norm in convolution blocks (running statistics
//! frozen at mean 0 / var 1; only scale and shift train) and layer norm
//! inside the attention blocks. Activations are ReLU throughout.

use crate::attention::{self, AttentionConfig, EvitBlockParams, FFN_EXPAND};
use crate::params::{init_conv, Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tensor, Value};
use crate::{Error, Result};

pub const BN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Res,
    FMbConv,
    Evit,
}

impl StageKind {
    pub fn tag(&self) -> &'static str {
        match self {
            StageKind::Res => "res",
            StageKind::FMbConv => "fmbconv",
            StageKind::Evit => "evit",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "res" => Ok(StageKind::Res),
            "fmbconv" => Ok(StageKind::FMbConv),
            "evit" => Ok(StageKind::Evit),
            other => Err(Error::Invalid(format!("unknown stage kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    /// Longest image side after preprocessing. Must be divisible by 64 so
    /// stage 5 (stride 64) stays integral; this implies the divisible-by-32
    /// requirement of the preprocessing contract.
    pub input_size: usize,
    pub stage_depths: [usize; 5],
    pub stage_widths: [usize; 5],
    pub stage_kinds: [StageKind; 5],
    pub neck_depth: usize,
    pub neck_width: usize,
    pub embed_dim: usize,
    /// Attention head width in the two attention stages.
    pub head_dim: usize,
    pub attn_eps: f32,
    /// Multi-scale aggregation kernel sizes for stages 4 and 5. Small
    /// configs leave stage 5 empty: its feature map can be below 3x3.
    pub stage4_scales: Vec<usize>,
    pub stage5_scales: Vec<usize>,
}

impl ModelConfig {
    /// Small fast preset used by tests and as the config-file default.
    pub fn desk() -> Self {
        ModelConfig {
            name: "desk".into(),
            input_size: 128,
            stage_depths: [1, 1, 1, 2, 2],
            stage_widths: [8, 16, 32, 64, 128],
            stage_kinds: [
                StageKind::Res,
                StageKind::Res,
                StageKind::FMbConv,
                StageKind::Evit,
                StageKind::Evit,
            ],
            neck_depth: 1,
            neck_width: 32,
            embed_dim: 32,
            head_dim: 8,
            attn_eps: 1e-6,
            stage4_scales: vec![3],
            stage5_scales: vec![],
        }
    }

    /// Wider desk preset.
    pub fn desk_large() -> Self {
        ModelConfig {
            name: "desk-large".into(),
            stage_widths: [16, 32, 64, 128, 256],
            neck_depth: 2,
            neck_width: 64,
            ..ModelConfig::desk()
        }
    }

    /// Faithful 512-input preset (L-series analogue). Not exercised by the
    /// heavy tests; provided for completeness.
    pub fn l512() -> Self {
        ModelConfig {
            name: "l512".into(),
            input_size: 512,
            stage_depths: [1, 2, 2, 4, 4],
            stage_widths: [32, 64, 128, 256, 512],
            neck_depth: 4,
            neck_width: 128,
            embed_dim: 64,
            head_dim: 16,
            stage4_scales: vec![5],
            stage5_scales: vec![5],
            ..ModelConfig::desk()
        }
    }

    /// Faithful 1024-input preset (XL-series analogue).
    pub fn xl1024() -> Self {
        ModelConfig {
            name: "xl1024".into(),
            input_size: 1024,
            ..ModelConfig::l512()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ModelConfig::desk()),
            "desk-large" => Ok(ModelConfig::desk_large()),
            "l512" => Ok(ModelConfig::l512()),
            "xl1024" => Ok(ModelConfig::xl1024()),
            other => Err(Error::Invalid(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size % 32 != 0 {
            return Err(Error::Invalid(format!(
                "input_size {} not divisible by 32",
                self.input_size
            )));
        }
        if self.input_size % 64 != 0 {
            return Err(Error::Invalid(format!(
                "input_size {} not divisible by 64: stage 5 runs at stride 64",
                self.input_size
            )));
        }
        if self.stage_kinds[3] != StageKind::Evit || self.stage_kinds[4] != StageKind::Evit {
            return Err(Error::Invalid("the last two stages must be `evit`".into()));
        }
        if self.stage_kinds[..3].iter().any(|k| *k == StageKind::Evit) {
            return Err(Error::Invalid(
                "attention stages are only supported as stages 4 and 5".into(),
            ));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(Error::Invalid("stage depths must be >= 1".into()));
        }
        if self.stage_widths.iter().any(|&w| w == 0) || self.neck_width == 0 || self.embed_dim == 0
        {
            return Err(Error::Invalid("widths must be >= 1".into()));
        }
        if self.neck_depth == 0 {
            return Err(Error::Invalid("neck_depth must be >= 1".into()));
        }
        for (stage, scales) in [(3usize, &self.stage4_scales), (4, &self.stage5_scales)] {
            let cfg = self.attention_config(stage)?;
            cfg.validate()?;
            let side = self.stage_side(stage);
            for &s in scales {
                if s > side {
                    return Err(Error::Invalid(format!(
                        "stage {} scale {s} exceeds its {side}x{side} feature map",
                        stage + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Spatial side of stage `i` (0-based): stride `4 << i`.
    pub fn stage_side(&self, i: usize) -> usize {
        self.input_size / (4 << i)
    }

    /// Side of the fused feature and of the output embedding: stride 16.
    pub fn embedding_side(&self) -> usize {
        self.input_size / 16
    }

    pub fn attention_config(&self, stage: usize) -> Result<AttentionConfig> {
        let scales = match stage {
            3 => self.stage4_scales.clone(),
            4 => self.stage5_scales.clone(),
            _ => {
                return Err(Error::Invalid(format!(
                    "stage {stage} is not an attention stage"
                )))
            }
        };
        AttentionConfig::new(self.stage_widths[stage], self.head_dim, self.attn_eps, scales)
    }
}

// ── Parameter bundles ───────────────────────────────────────────────

/// Frozen-statistics batch norm: running mean/var are non-trainable.
pub struct BnParams {
    pub mean: ParamId,
    pub var: ParamId,
    pub scale: ParamId,
    pub shift: ParamId,
}

impl BnParams {
    fn init(store: &mut ParamStore, name: &str, c: usize) -> Self {
        BnParams {
            mean: store.add(format!("{name}.mean"), Tensor::zeros(&[c]), false),
            var: store.add(format!("{name}.var"), Tensor::full(&[c], 1.0), false),
            scale: store.add(format!("{name}.scale"), Tensor::full(&[c], 1.0), true),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[c]), true),
        }
    }

    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: Value<'t>) -> Result<Value<'t>> {
        x.batchnorm_infer(
            ctx.p(self.mean)?,
            ctx.p(self.var)?,
            ctx.p(self.scale)?,
            ctx.p(self.shift)?,
            BN_EPS,
        )
    }
}

/// Convolution followed by batch norm and optional ReLU. Stride-2 variants
/// run the convolution at stride 1 and take the top-left 2x subsample, which
/// matches a floor-semantics strided convolution exactly (the conv2d
/// contract does not admit odd kernels at stride 2 on even inputs).
pub struct ConvNorm {
    pub w: ParamId,
    pub bn: BnParams,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        assert!(stride == 1 || stride == 2, "only strides 1 and 2 are used");
        ConvNorm {
            w: store.add(format!("{name}.w"), init_conv(rng, &[cout, cin, k, k]), true),
            bn: BnParams::init(store, name, cout),
            stride,
            pad: k / 2,
            relu,
        }
    }

    fn apply<'t>(&self, ctx: &Ctx<'t, '_>, x: Value<'t>) -> Result<Value<'t>> {
        let mut y = x.conv2d(ctx.p(self.w)?, 1, self.pad, 1)?;
        if self.stride == 2 {
            y = y.downsample2x()?;
        }
        let y = self.bn.apply(ctx, y)?;
        if self.relu {
            y.relu()
        } else {
            Ok(y)
        }
    }
}

/// Basic two-conv residual block; the stride-2 / channel-change variant uses
/// a strided 1x1 projection shortcut.
pub struct ResBlockParams {
    pub conv1: ConvNorm,
    pub conv2: ConvNorm,
    pub shortcut: Option<ConvNorm>,
}

impl ResBlockParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        ResBlockParams {
            conv1: ConvNorm::init(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride, true),
            conv2: ConvNorm::init(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, false),
            shortcut: (stride != 1 || cin != cout).then(|| {
                ConvNorm::init(
                    store,
                    rng,
                    &format!("{name}.shortcut"),
                    cin,
                    cout,
                    1,
                    stride,
                    false,
                )
            }),
        }
    }
}

pub fn res_block<'t>(ctx: &Ctx<'t, '_>, x: Value<'t>, p: &ResBlockParams) -> Result<Value<'t>> {
    let branch = p.conv2.apply(ctx, p.conv1.apply(ctx, x)?)?;
    let skip = match &p.shortcut {
        Some(s) => s.apply(ctx, x)?,
        None => x,
    };
    skip.add(branch)?.relu()
}

/// Inverted bottleneck whose expansion is a full 3x3 convolution:
/// 3x3 conv (x ratio, may stride) -> BN -> ReLU -> 1x1 project -> BN, with a
/// residual when shapes permit.
pub struct FusedMbConvParams {
    pub expand: ConvNorm,
    pub project: ConvNorm,
    pub residual: bool,
}

impl FusedMbConvParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        expand_ratio: usize,
        stride: usize,
    ) -> Self {
        let mid = cin * expand_ratio;
        FusedMbConvParams {
            expand: ConvNorm::init(store, rng, &format!("{name}.expand"), cin, mid, 3, stride, true),
            project: ConvNorm::init(store, rng, &format!("{name}.project"), mid, cout, 1, 1, false),
            residual: stride == 1 && cin == cout,
        }
    }
}

pub fn fused_mbconv<'t>(
    ctx: &Ctx<'t, '_>,
    x: Value<'t>,
    p: &FusedMbConvParams,
) -> Result<Value<'t>> {
    let branch = p.project.apply(ctx, p.expand.apply(ctx, x)?)?;
    if p.residual {
        x.add(branch)
    } else {
        Ok(branch)
    }
}

pub enum BlockParams {
    Res(ResBlockParams),
    FMbConv(FusedMbConvParams),
    Evit(EvitBlockParams),
}

pub struct EncoderParams {
    pub stem: ConvNorm,
    pub stages: Vec<Vec<BlockParams>>,
    /// 1x1 projections of stages 3..5 onto the neck width.
    pub fuse_proj: [ConvNorm; 3],
    pub neck_blocks: Vec<FusedMbConvParams>,
    pub out_proj_w: ParamId,
    pub out_proj_b: ParamId,
}

fn init_evit_block(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    cfg: &AttentionConfig,
) -> EvitBlockParams {
    let d = cfg.dim;
    let g = cfg.group_count();
    let e = d * FFN_EXPAND;
    EvitBlockParams {
        attn_norm_scale: store.add(format!("{name}.attn_norm.scale"), Tensor::full(&[d], 1.0), true),
        attn_norm_shift: store.add(format!("{name}.attn_norm.shift"), Tensor::zeros(&[d]), true),
        qkv_w: store.add(format!("{name}.qkv.w"), init_conv(rng, &[3 * d, d, 1, 1]), true),
        agg_w: cfg
            .scales
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                store.add(
                    format!("{name}.agg{i}.w"),
                    attention::mean_kernel(3 * d, s),
                    true,
                )
            })
            .collect(),
        proj_w: store.add(format!("{name}.proj.w"), init_conv(rng, &[d, d * g, 1, 1]), true),
        ffn_norm_scale: store.add(format!("{name}.ffn_norm.scale"), Tensor::full(&[d], 1.0), true),
        ffn_norm_shift: store.add(format!("{name}.ffn_norm.shift"), Tensor::zeros(&[d]), true),
        ffn_expand_w: store.add(format!("{name}.ffn_expand.w"), init_conv(rng, &[e, d, 1, 1]), true),
        ffn_dw_w: store.add(format!("{name}.ffn_dw.w"), init_conv(rng, &[e, 1, 3, 3]), true),
        ffn_proj_w: store.add(format!("{name}.ffn_proj.w"), init_conv(rng, &[d, e, 1, 1]), true),
    }
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.stage_widths;
        let stem = ConvNorm::init(store, rng, "enc.stem", 3, w[0], 3, 2, true);
        let mut stages = Vec::with_capacity(5);
        for s in 0..5 {
            let cin = if s == 0 { w[0] } else { w[s - 1] };
            let cout = w[s];
            let mut blocks = Vec::with_capacity(cfg.stage_depths[s]);
            for b in 0..cfg.stage_depths[s] {
                let name = format!("enc.s{}.b{b}", s + 1);
                let (bin, stride) = if b == 0 { (cin, 2) } else { (cout, 1) };
                let block = match cfg.stage_kinds[s] {
                    StageKind::Res => {
                        BlockParams::Res(ResBlockParams::init(store, rng, &name, bin, cout, stride))
                    }
                    StageKind::FMbConv => BlockParams::FMbConv(FusedMbConvParams::init(
                        store, rng, &name, bin, cout, FFN_EXPAND, stride,
                    )),
                    StageKind::Evit => {
                        if b == 0 {
                            // Attention stages enter through a strided
                            // fused-MBConv downsampler.
                            BlockParams::FMbConv(FusedMbConvParams::init(
                                store, rng, &name, bin, cout, FFN_EXPAND, stride,
                            ))
                        } else {
                            BlockParams::Evit(init_evit_block(
                                store,
                                rng,
                                &name,
                                &cfg.attention_config(s)?,
                            ))
                        }
                    }
                };
                blocks.push(block);
            }
            stages.push(blocks);
        }
        let fuse_proj = [
            ConvNorm::init(store, rng, "enc.fuse.p3", w[2], cfg.neck_width, 1, 1, false),
            ConvNorm::init(store, rng, "enc.fuse.p4", w[3], cfg.neck_width, 1, 1, false),
            ConvNorm::init(store, rng, "enc.fuse.p5", w[4], cfg.neck_width, 1, 1, false),
        ];
        let neck_blocks = (0..cfg.neck_depth)
            .map(|i| {
                FusedMbConvParams::init(
                    store,
                    rng,
                    &format!("enc.neck.b{i}"),
                    cfg.neck_width,
                    cfg.neck_width,
                    FFN_EXPAND,
                    1,
                )
            })
            .collect();
        let out_proj_w = store.add(
            "enc.out.w",
            init_conv(rng, &[cfg.embed_dim, cfg.neck_width, 1, 1]),
            true,
        );
        let out_proj_b = store.add("enc.out.b", Tensor::zeros(&[cfg.embed_dim, 1, 1]), true);
        Ok(EncoderParams {
            stem,
            stages,
            fuse_proj,
            neck_blocks,
            out_proj_w,
            out_proj_b,
        })
    }
}

fn run_block<'t>(
    ctx: &Ctx<'t, '_>,
    x: Value<'t>,
    block: &BlockParams,
    attn_cfg: Option<&AttentionConfig>,
) -> Result<Value<'t>> {
    match block {
        BlockParams::Res(p) => res_block(ctx, x, p),
        BlockParams::FMbConv(p) => fused_mbconv(ctx, x, p),
        BlockParams::Evit(p) => attention::efficientvit_block(
            ctx,
            x,
            p,
            attn_cfg.expect("attention config for evit block"),
        ),
    }
}

/// Stem plus the five stages; returns the stage-3/4/5 feature maps.
pub fn encoder_stages<'t>(
    ctx: &Ctx<'t, '_>,
    image: Value<'t>,
    p: &EncoderParams,
    cfg: &ModelConfig,
) -> Result<(Value<'t>, Value<'t>, Value<'t>)> {
    let shape = image.shape();
    if shape != vec![3, cfg.input_size, cfg.input_size] {
        return Err(Error::Shape(format!(
            "encoder wants [3, {0}, {0}], got {shape:?}",
            cfg.input_size
        )));
    }
    let mut x = p.stem.apply(ctx, image)?;
    let mut pyramid = Vec::with_capacity(3);
    for s in 0..5 {
        let attn_cfg = if cfg.stage_kinds[s] == StageKind::Evit {
            Some(cfg.attention_config(s)?)
        } else {
            None
        };
        for block in &p.stages[s] {
            x = run_block(ctx, x, block, attn_cfg.as_ref())?;
        }
        if s >= 2 {
            pyramid.push(x);
        }
    }
    Ok((pyramid[0], pyramid[1], pyramid[2]))
}

/// Project the three pyramid levels to the neck width, upsample the deeper
/// two onto the stage-3 grid, add, and run the neck.
pub fn fuse_and_neck<'t>(
    ctx: &Ctx<'t, '_>,
    s3: Value<'t>,
    s4: Value<'t>,
    s5: Value<'t>,
    p: &EncoderParams,
) -> Result<Value<'t>> {
    let f3 = p.fuse_proj[0].apply(ctx, s3)?;
    let f4 = p.fuse_proj[1].apply(ctx, s4)?.upsample2x()?;
    let f5 = p.fuse_proj[2].apply(ctx, s5)?.upsample2x()?.upsample2x()?;
    let mut fused = f3.add(f4)?.add(f5)?;
    for block in &p.neck_blocks {
        fused = fused_mbconv(ctx, fused, block)?;
    }
    let out = fused.conv2d(ctx.p(p.out_proj_w)?, 1, 0, 1)?;
    out.add(ctx.p(p.out_proj_b)?)
}

/// Full encoder: `[3, S, S]` image to `[embed_dim, S/16, S/16]` embedding.
pub fn image_encoder_forward<'t>(
    ctx: &Ctx<'t, '_>,
    image: Value<'t>,
    p: &EncoderParams,
    cfg: &ModelConfig,
) -> Result<Value<'t>> {
    let (s3, s4, s5) = encoder_stages(ctx, image, p, cfg)?;
    fuse_and_neck(ctx, s3, s4, s5, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            name: "tiny".into(),
            input_size: 64,
            stage_depths: [1, 1, 1, 2, 1],
            stage_widths: [4, 8, 8, 16, 16],
            neck_width: 8,
            embed_dim: 8,
            head_dim: 8,
            stage4_scales: vec![],
            stage5_scales: vec![],
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn presets_validate() {
        for cfg in [
            ModelConfig::desk(),
            ModelConfig::desk_large(),
            ModelConfig::l512(),
            ModelConfig::xl1024(),
            tiny_cfg(),
        ] {
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", cfg.name));
        }
    }

    #[test]
    fn config_rejects_bad_shapes() {
        let mut cfg = ModelConfig::desk();
        cfg.input_size = 96; // divisible by 32, not by 64
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk();
        cfg.stage_kinds[4] = StageKind::Res;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk();
        cfg.stage4_scales = vec![5]; // stage-4 map is 4x4 at input 128
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk();
        cfg.stage_widths[3] = 30; // not divisible by head_dim 8
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_sides_follow_strides() {
        let cfg = ModelConfig::desk();
        assert_eq!(cfg.stage_side(0), 32); // 128/4
        assert_eq!(cfg.stage_side(2), 8); // 128/16
        assert_eq!(cfg.stage_side(4), 2); // 128/64
        assert_eq!(cfg.embedding_side(), 8);
    }

    #[test]
    fn res_block_zero_weights_is_relu_of_input() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let p = ResBlockParams::init(&mut store, &mut rng, "t", 4, 4, 1);
        for id in [p.conv1.w, p.conv2.w] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let x = Tensor::from_fn(&[4, 5, 5], |i| (i as f32 * 0.37).sin());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let xv = tape.leaf(&x).unwrap();
        let y = res_block(&ctx, xv, &p).unwrap();
        let want: Vec<f32> = x.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(tape.tensor(y).data(), &want[..]);
    }

    #[test]
    fn res_block_shapes() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let p1 = ResBlockParams::init(&mut store, &mut rng, "s1", 4, 4, 1);
        let p2 = ResBlockParams::init(&mut store, &mut rng, "s2", 4, 8, 2);
        assert!(p1.shortcut.is_none());
        assert!(p2.shortcut.is_some());
        let x = Tensor::from_fn(&[4, 6, 6], |i| (i as f32 * 0.1).cos());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let xv = tape.leaf(&x).unwrap();
        assert_eq!(res_block(&ctx, xv, &p1).unwrap().shape(), vec![4, 6, 6]);
        assert_eq!(res_block(&ctx, xv, &p2).unwrap().shape(), vec![8, 3, 3]);
    }

    #[test]
    fn fused_mbconv_zero_projection_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let p = FusedMbConvParams::init(&mut store, &mut rng, "t", 4, 4, 4, 1);
        let shape = store.get(p.project.w).shape().to_vec();
        store.set(p.project.w, Tensor::zeros(&shape)).unwrap();
        let x = Tensor::from_fn(&[4, 4, 4], |i| i as f32 * 0.05 - 0.3);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let xv = tape.leaf(&x).unwrap();
        let y = fused_mbconv(&ctx, xv, &p).unwrap();
        assert_eq!(tape.tensor(y).data(), x.data());
    }

    #[test]
    fn fused_mbconv_identity_init_passthrough_up_to_norm() {
        // expand_ratio 1, identity kernels: the branch reproduces the input
        // up to the BN 1/sqrt(1+eps) factor, so out = x + x/sqrt(1+eps).
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let c = 3;
        let p = FusedMbConvParams::init(&mut store, &mut rng, "t", c, c, 1, 1);
        let mut eye3 = Tensor::zeros(&[c, c, 3, 3]);
        for ch in 0..c {
            eye3.data_mut()[((ch * c + ch) * 3 + 1) * 3 + 1] = 1.0;
        }
        store.set(p.expand.w, eye3).unwrap();
        let mut eye1 = Tensor::zeros(&[c, c, 1, 1]);
        for ch in 0..c {
            eye1.data_mut()[ch * c + ch] = 1.0;
        }
        store.set(p.project.w, eye1).unwrap();
        let x = Tensor::from_fn(&[c, 4, 4], |i| 0.1 + (i % 7) as f32 * 0.1); // positive
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let xv = tape.leaf(&x).unwrap();
        let y = fused_mbconv(&ctx, xv, &p).unwrap();
        let factor = 1.0 + 1.0 / (1.0f32 + BN_EPS).sqrt() / (1.0f32 + BN_EPS).sqrt();
        for (got, want) in tape.tensor(y).data().iter().zip(x.data()) {
            assert!(
                (got - want * factor).abs() < 1e-5,
                "{got} vs {want} * {factor}"
            );
        }
    }

    #[test]
    fn fused_mbconv_gradient() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let p = FusedMbConvParams::init(&mut store, &mut rng, "t", 4, 4, 2, 1);
        let x = Tensor::from_fn(&[4, 4, 4], |_| rng.next_f32() * 2.0 - 1.0);
        let err = crate::tensor::grad_check(
            |tape, v| {
                let ctx = Ctx::new(tape, &store);
                fused_mbconv(&ctx, v, &p)?.add(v.mul_scalar(5.0)?)
            },
            &x,
            2e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "fused_mbconv rel err {err}");
    }

    #[test]
    fn encoder_output_shape_desk() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(7);
        let p = EncoderParams::init(&mut store, &mut rng, &cfg).unwrap();
        let image = Tensor::from_fn(&[3, 128, 128], |_| rng.next_f32());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let iv = tape.leaf(&image).unwrap();
        let emb = image_encoder_forward(&ctx, iv, &p, &cfg).unwrap();
        assert_eq!(emb.shape(), vec![32, 8, 8]);
        assert!(tape.tensor(emb).is_finite(), "finite at depth 5");
    }

    #[test]
    fn encoder_rejects_wrong_input_size() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(8);
        let p = EncoderParams::init(&mut store, &mut rng, &cfg).unwrap();
        let image = Tensor::zeros(&[3, 32, 32]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let iv = tape.leaf(&image).unwrap();
        assert!(image_encoder_forward(&ctx, iv, &p, &cfg).is_err());
    }

    #[test]
    fn zero_image_zero_init_biases_give_zero_embedding() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let p = EncoderParams::init(&mut store, &mut rng, &cfg).unwrap();
        let image = Tensor::zeros(&[3, 64, 64]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let iv = tape.leaf(&image).unwrap();
        let emb = image_encoder_forward(&ctx, iv, &p, &cfg).unwrap();
        assert!(tape.tensor(emb).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_fusion_projections_reduce_to_stage3_encoder() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(10);
        let p = EncoderParams::init(&mut store, &mut rng, &cfg).unwrap();
        for proj in &p.fuse_proj[1..] {
            let shape = store.get(proj.w).shape().to_vec();
            store.set(proj.w, Tensor::zeros(&shape)).unwrap();
        }
        let image = Tensor::from_fn(&[3, 64, 64], |_| rng.next_f32());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let iv = tape.leaf(&image).unwrap();
        let full = image_encoder_forward(&ctx, iv, &p, &cfg).unwrap();

        // Structural ablation: run the pyramid, keep only the stage-3 path.
        // Zeroed projections leave a BN shift of zero, so the added maps are
        // exactly zero and both routes agree bitwise.
        let tape2 = Tape::new();
        let ctx2 = Ctx::new(&tape2, &store);
        let iv2 = tape2.leaf(&image).unwrap();
        let (s3, _s4, _s5) = encoder_stages(&ctx2, iv2, &p, &cfg).unwrap();
        let mut fused = p.fuse_proj[0].apply(&ctx2, s3).unwrap();
        for block in &p.neck_blocks {
            fused = fused_mbconv(&ctx2, fused, block).unwrap();
        }
        let out = fused
            .conv2d(ctx2.p(p.out_proj_w).unwrap(), 1, 0, 1)
            .unwrap()
            .add(ctx2.p(p.out_proj_b).unwrap())
            .unwrap();
        assert_eq!(tape.tensor(full).data(), tape2.tensor(out).data());
    }

    #[test]
    fn encoder_forward_is_deterministic() {
        let cfg = tiny_cfg();
        let run = || {
            let mut store = ParamStore::new();
            let mut rng = Rng::new(11);
            let p = EncoderParams::init(&mut store, &mut rng, &cfg).unwrap();
            let image = Tensor::from_fn(&[3, 64, 64], |_| rng.next_f32());
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let iv = tape.leaf(&image).unwrap();
            let emb = image_encoder_forward(&ctx, iv, &p, &cfg).unwrap();
            tape.tensor(emb).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
