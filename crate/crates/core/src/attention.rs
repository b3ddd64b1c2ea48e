//! ReLU linear attention, in a quadratic reference form and the reordered
//! linear-cost form, plus multi-scale token aggregation and the attention
//! block built from them.
//!
//! The similarity kernel is `ReLU(q_i) . ReLU(k_j)`, which factorizes:
//! instead of materializing the `N x N` weight matrix, the fast path computes
//! the `d x d` summary `ReLU(K)^T V` and the `d`-vector `ReLU(K)^T 1` once and
//! applies them per query, dropping the cost from `O(N^2 d)` to `O(N d^2)`.
//! The two forms agree up to f32 summation reordering.
//!
//! The guard epsilon sits in the denominator only, so exact zeros in the
//! numerator stay exact (all-negative queries produce all-zero rows).
//! There is no `1/sqrt(d)` scaling in either linear form.

use crate::params::{Ctx, ParamId};
use crate::tensor::{Tape, Tensor, Value};
use crate::{Error, Result};

/// Epsilon used by the layer norms inside attention blocks (distinct from the
/// attention denominator guard, which is configured).
pub const LN_EPS: f32 = 1e-5;

/// Expansion ratio of the block's convolutional FFN.
pub const FFN_EXPAND: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    /// Embedding width of the block.
    pub dim: usize,
    /// Number of attention heads; `dim == heads * head_dim`.
    pub heads: usize,
    pub head_dim: usize,
    /// Denominator guard of the linear attention.
    pub eps: f32,
    /// Kernel sizes of the depthwise multi-scale aggregation (odd, >= 3).
    /// Empty means a single token group with no aggregation.
    pub scales: Vec<usize>,
}

impl AttentionConfig {
    pub fn new(dim: usize, head_dim: usize, eps: f32, scales: Vec<usize>) -> Result<Self> {
        if head_dim == 0 || dim % head_dim != 0 {
            return Err(Error::Invalid(format!(
                "attention dim {dim} not divisible by head_dim {head_dim}"
            )));
        }
        let cfg = AttentionConfig {
            dim,
            heads: dim / head_dim,
            head_dim,
            eps,
            scales,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != self.heads * self.head_dim {
            return Err(Error::Invalid(format!(
                "attention dim {} != heads {} x head_dim {}",
                self.dim, self.heads, self.head_dim
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Invalid(format!(
                "attention eps must be > 0, got {}",
                self.eps
            )));
        }
        for &s in &self.scales {
            if s < 3 || s % 2 == 0 {
                return Err(Error::Invalid(format!(
                    "aggregation scale {s} must be odd and >= 3"
                )));
            }
        }
        Ok(())
    }

    /// Token groups produced by multi-scale aggregation.
    pub fn group_count(&self) -> usize {
        1 + self.scales.len()
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig::new(64, 8, 1e-6, vec![5]).expect("default config is valid")
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    let s = q.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("attention wants [N,d] tokens, got {s:?}")));
    }
    if k.shape() != s || v.shape() != s {
        return Err(Error::Shape(format!(
            "attention Q/K/V shapes disagree: {:?} / {:?} / {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok((s[0], s[1]))
}

/// Plain softmax attention with `1/sqrt(d)` scaling, row-streamed so no
/// `N x N` matrix is ever stored. Quadratic cost; used only as the baseline
/// in benchmarks, never inside the model.
pub fn softmax_attention_ref(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, d) = check_qkv(q, k, v)?;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; n * d];
    let mut scores = vec![0.0f32; n];
    for i in 0..n {
        let qi = &qd[i * d..(i + 1) * d];
        let mut max = f32::NEG_INFINITY;
        for j in 0..n {
            let kj = &kd[j * d..(j + 1) * d];
            let mut s = 0.0f32;
            for t in 0..d {
                s += qi[t] * kj[t];
            }
            scores[j] = s * scale;
            max = max.max(scores[j]);
        }
        let mut denom = 0.0f32;
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..n {
            let w = (scores[j] - max).exp();
            denom += w;
            let vj = &vd[j * d..(j + 1) * d];
            for t in 0..d {
                orow[t] += w * vj[t];
            }
        }
        for o in orow.iter_mut() {
            *o /= denom;
        }
    }
    Tensor::from_vec(q.shape(), out)
}

/// ReLU linear attention evaluated in the explicit `N x N` order:
/// `O_i = sum_j (ReLU(q_i).ReLU(k_j)) v_j / (sum_j ReLU(q_i).ReLU(k_j) + eps)`.
/// Reference semantics for the fast path.
pub fn relu_linear_attention_quadratic(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("attention eps must be > 0, got {eps}")));
    }
    let (n, d) = check_qkv(q, k, v)?;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0f32; n * d];
    let mut acc = vec![0.0f32; d];
    for i in 0..n {
        let qi = &qd[i * d..(i + 1) * d];
        let mut denom = 0.0f32;
        acc.iter_mut().for_each(|a| *a = 0.0);
        for j in 0..n {
            let kj = &kd[j * d..(j + 1) * d];
            let mut s = 0.0f32;
            for t in 0..d {
                s += qi[t].max(0.0) * kj[t].max(0.0);
            }
            if s != 0.0 {
                let vj = &vd[j * d..(j + 1) * d];
                for t in 0..d {
                    acc[t] += s * vj[t];
                }
            }
            denom += s;
        }
        let inv = 1.0 / (denom + eps);
        for t in 0..d {
            out[i * d + t] = acc[t] * inv;
        }
    }
    Tensor::from_vec(q.shape(), out)
}

/// ReLU linear attention with the multiplication reassociated: builds the
/// `d x d` summary `ReLU(K)^T V` and the column sums `ReLU(K)^T 1` first,
/// then applies both per query. `O(N d^2)` cost, numerically equivalent to
/// the quadratic form up to f32 reordering.
pub fn relu_linear_attention_fast(q: &Tensor, k: &Tensor, v: &Tensor, eps: f32) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("attention eps must be > 0, got {eps}")));
    }
    let (n, d) = check_qkv(q, k, v)?;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut kv = vec![0.0f32; d * d];
    let mut ksum = vec![0.0f32; d];
    for j in 0..n {
        let kj = &kd[j * d..(j + 1) * d];
        let vj = &vd[j * d..(j + 1) * d];
        for a in 0..d {
            let ka = kj[a].max(0.0);
            ksum[a] += ka;
            if ka != 0.0 {
                let row = &mut kv[a * d..(a + 1) * d];
                for (o, &vb) in row.iter_mut().zip(vj) {
                    *o += ka * vb;
                }
            }
        }
    }
    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        let qi = &qd[i * d..(i + 1) * d];
        let orow = &mut out[i * d..(i + 1) * d];
        let mut denom = 0.0f32;
        for a in 0..d {
            let qa = qi[a].max(0.0);
            denom += qa * ksum[a];
            if qa != 0.0 {
                let row = &kv[a * d..(a + 1) * d];
                for (o, &kvb) in orow.iter_mut().zip(row) {
                    *o += qa * kvb;
                }
            }
        }
        let inv = 1.0 / (denom + eps);
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    Tensor::from_vec(q.shape(), out)
}

// ── Tape-level building blocks ──────────────────────────────────────

/// One Q/K/V token group, each `[N, dim]`.
pub struct QkvGroup<'t> {
    pub q: Value<'t>,
    pub k: Value<'t>,
    pub v: Value<'t>,
}

/// Split a `[3*dim, H, W]` Q/K/V map into token groups: the original tokens
/// plus one group per aggregation scale. Each scale applies a learned
/// depthwise kernel with edge-replicate padding over the full map (a uniform
/// kernel therefore reproduces constant maps exactly); groups are later
/// concatenated along the head axis.
pub fn multi_scale_aggregate<'t>(
    qkv: Value<'t>,
    agg_kernels: &[Value<'t>],
    cfg: &AttentionConfig,
) -> Result<Vec<QkvGroup<'t>>> {
    let shape = qkv.shape();
    if shape.len() != 3 || shape[0] != 3 * cfg.dim {
        return Err(Error::Shape(format!(
            "multi_scale_aggregate wants [3*{}, H, W], got {shape:?}",
            cfg.dim
        )));
    }
    if agg_kernels.len() != cfg.scales.len() {
        return Err(Error::Shape(format!(
            "{} aggregation kernels for {} scales",
            agg_kernels.len(),
            cfg.scales.len()
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    for &s in &cfg.scales {
        if s > h.min(w) {
            return Err(Error::Invalid(format!(
                "aggregation scale {s} larger than feature map {h}x{w}"
            )));
        }
    }
    let mut groups = Vec::with_capacity(cfg.group_count());
    groups.push(tokens_from_map(qkv, cfg.dim)?);
    for kernel in agg_kernels {
        let aggregated = qkv.dwconv_repl(*kernel)?;
        groups.push(tokens_from_map(aggregated, cfg.dim)?);
    }
    Ok(groups)
}

/// `[3*dim, H, W]` map -> Q/K/V token matrices `[H*W, dim]`.
fn tokens_from_map(map: Value<'_>, dim: usize) -> Result<QkvGroup<'_>> {
    let shape = map.shape();
    let n = shape[1] * shape[2];
    let tokens = map.reshape(&[3 * dim, n])?.transpose2()?;
    Ok(QkvGroup {
        q: tokens.slice2(1, 0, dim)?,
        k: tokens.slice2(1, dim, 2 * dim)?,
        v: tokens.slice2(1, 2 * dim, 3 * dim)?,
    })
}

/// Differentiable fast-path ReLU linear attention on `[N, d]` token values.
pub fn fast_attention<'t>(
    tape: &'t Tape,
    q: Value<'t>,
    k: Value<'t>,
    v: Value<'t>,
    eps: f32,
) -> Result<Value<'t>> {
    let n = q.shape()[0];
    let qr = q.relu()?;
    let kr = k.relu()?;
    let kt = kr.transpose2()?;
    let kv = kt.matmul(v)?;
    let num = qr.matmul(kv)?;
    let ones = tape.leaf(&Tensor::full(&[n, 1], 1.0))?;
    let ksum = kt.matmul(ones)?;
    let den = qr.matmul(ksum)?.add_scalar(eps)?;
    num.div(den)
}

/// Parameters of one attention block. Convolutions inside the block carry no
/// bias; the layer norms provide the affine terms.
pub struct EvitBlockParams {
    pub attn_norm_scale: ParamId,
    pub attn_norm_shift: ParamId,
    /// 1x1 projection to Q/K/V: `[3*dim, dim, 1, 1]`.
    pub qkv_w: ParamId,
    /// Depthwise aggregation kernels, one `[3*dim, s, s]` per scale.
    pub agg_w: Vec<ParamId>,
    /// 1x1 projection back: `[dim, dim*groups, 1, 1]`.
    pub proj_w: ParamId,
    pub ffn_norm_scale: ParamId,
    pub ffn_norm_shift: ParamId,
    /// `[dim*FFN_EXPAND, dim, 1, 1]`.
    pub ffn_expand_w: ParamId,
    /// Depthwise `[dim*FFN_EXPAND, 1, 3, 3]`.
    pub ffn_dw_w: ParamId,
    /// `[dim, dim*FFN_EXPAND, 1, 1]`.
    pub ffn_proj_w: ParamId,
}

/// Full attention block on a `[dim, H, W]` map:
/// pre-norm -> 1x1 Q/K/V -> multi-scale aggregation -> per-head fast linear
/// attention per group -> concat -> 1x1 projection -> residual, followed by a
/// pre-norm convolutional FFN (1x1 expand, ReLU, depthwise 3x3, ReLU, 1x1
/// project) with its own residual. Zero output projections make the block an
/// exact identity.
pub fn efficientvit_block<'t>(
    ctx: &Ctx<'t, '_>,
    x: Value<'t>,
    p: &EvitBlockParams,
    cfg: &AttentionConfig,
) -> Result<Value<'t>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != cfg.dim {
        return Err(Error::Shape(format!(
            "attention block wants [{}, H, W], got {shape:?}",
            cfg.dim
        )));
    }
    let (h, w) = (shape[1], shape[2]);

    let normed = x.layernorm(ctx.p(p.attn_norm_scale)?, ctx.p(p.attn_norm_shift)?, LN_EPS, 0)?;
    let qkv = normed.conv2d(ctx.p(p.qkv_w)?, 1, 0, 1)?;
    let kernels: Vec<Value<'_>> = p.agg_w.iter().map(|id| ctx.p(*id)).collect::<Result<_>>()?;
    let groups = multi_scale_aggregate(qkv, &kernels, cfg)?;

    let mut head_outputs = Vec::with_capacity(groups.len() * cfg.heads);
    for g in &groups {
        for head in 0..cfg.heads {
            let (lo, hi) = (head * cfg.head_dim, (head + 1) * cfg.head_dim);
            let o = fast_attention(
                ctx.tape(),
                g.q.slice2(1, lo, hi)?,
                g.k.slice2(1, lo, hi)?,
                g.v.slice2(1, lo, hi)?,
                cfg.eps,
            )?;
            head_outputs.push(o);
        }
    }
    let merged = ctx.tape().concat2(&head_outputs, 1)?; // [N, dim*groups]
    let map = merged
        .transpose2()?
        .reshape(&[cfg.dim * groups.len(), h, w])?;
    let attn_out = map.conv2d(ctx.p(p.proj_w)?, 1, 0, 1)?;
    let x = x.add(attn_out)?;

    let normed = x.layernorm(ctx.p(p.ffn_norm_scale)?, ctx.p(p.ffn_norm_shift)?, LN_EPS, 0)?;
    let expanded = normed.conv2d(ctx.p(p.ffn_expand_w)?, 1, 0, 1)?.relu()?;
    let mixed = expanded
        .conv2d(ctx.p(p.ffn_dw_w)?, 1, 1, cfg.dim * FFN_EXPAND)?
        .relu()?;
    let ffn_out = mixed.conv2d(ctx.p(p.ffn_proj_w)?, 1, 0, 1)?;
    x.add(ffn_out)
}

/// Depthwise mean kernel `[c, s, s]` with weight `1/s^2`: the initial value
/// of the aggregation kernels.
pub fn mean_kernel(c: usize, s: usize) -> Tensor {
    Tensor::full(&[c, s, s], 1.0 / (s * s) as f32)
}
