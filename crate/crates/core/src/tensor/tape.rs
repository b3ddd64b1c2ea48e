//! Differentiation tape and tensor operations.
//!
//! A [`Tape`] owns every intermediate value of a forward pass. Operations are
//! invoked through [`Value`] handles (cheap copyable indices into the tape)
//! and append one node each, so the node order is already topological:
//! an operation's inputs always precede it. `backward` walks the nodes in
//! reverse once, accumulating vector-Jacobian products.
//!
//! Numeric conventions:
//! - f32 storage and arithmetic throughout, fixed left-to-right accumulation
//!   over every contraction, so results are bitwise reproducible.
//! - ReLU (and `clamp_min`) backward uses subgradient 0 at the kink.
//! - Broadcasting in binary ops requires equal rank; each dimension must
//!   match or be 1 on the side being expanded.

use std::cell::RefCell;

use super::check_finite;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Neg,
    Ln,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    PowScalar {
        x: usize,
        e: f32,
    },
    ClampMin {
        x: usize,
        floor: f32,
    },
    MulScalar {
        x: usize,
        c: f32,
    },
    AddScalar {
        x: usize,
    },
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    ConvTranspose2x {
        x: usize,
        w: usize,
    },
    DwConvRepl {
        x: usize,
        w: usize,
    },
    BatchNormInfer {
        x: usize,
        mean: usize,
        var: usize,
        scale: usize,
        shift: usize,
        eps: f32,
    },
    LayerNorm {
        x: usize,
        scale: usize,
        shift: usize,
        eps: f32,
        axis: usize,
    },
    SoftmaxLast {
        x: usize,
    },
    Upsample2x {
        x: usize,
    },
    Downsample2x {
        x: usize,
    },
    SumAll {
        x: usize,
    },
    MeanAll {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Transpose2 {
        x: usize,
    },
    Slice2 {
        x: usize,
        axis: usize,
        from: usize,
        to: usize,
    },
    Concat2 {
        parts: Vec<usize>,
        axis: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Value<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Per-node gradients produced by a backward pass.
pub struct Grads {
    bufs: Vec<Option<Vec<f32>>>,
}

impl Grads {
    /// Gradient of `v`, or `None` when `v` is unreachable from the loss.
    pub fn of(&self, v: Value<'_>) -> Option<&[f32]> {
        self.bufs.get(v.id).and_then(|b| b.as_deref())
    }

    /// Gradient of `v` as a dense buffer; unreachable values yield zeros.
    pub fn dense(&self, v: Value<'_>) -> Vec<f32> {
        match self.of(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; v.numel()],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f32>, op: Op) -> Value<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, data, op });
        Value {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Lift a tensor onto the tape as a leaf. Leaves are what `backward`
    /// reports gradients for.
    pub fn leaf(&self, t: &super::Tensor) -> Result<Value<'_>> {
        check_finite(t.data(), "leaf input")?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf))
    }

    pub fn leaf_scalar(&self, v: f32) -> Result<Value<'_>> {
        self.leaf(&super::Tensor::scalar(v))
    }

    /// Concatenate 2-D values along `axis` (0 = rows, 1 = cols).
    pub fn concat2<'t>(&'t self, parts: &[Value<'t>], axis: usize) -> Result<Value<'t>> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        if axis > 1 {
            return Err(Error::Shape(format!("concat2 axis {axis} out of range")));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        for s in &shapes {
            if s.len() != 2 {
                return Err(Error::Shape(format!("concat2 wants 2-D parts, got {s:?}")));
            }
            if s[1 - axis] != shapes[0][1 - axis] {
                return Err(Error::Shape(format!(
                    "concat2 mismatched off-axis dims: {:?} vs {:?}",
                    shapes[0], s
                )));
            }
        }
        let off = shapes[0][1 - axis];
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let (rows, cols) = if axis == 0 { (total, off) } else { (off, total) };
        let mut out = vec![0.0f32; rows * cols];
        {
            let nodes = self.nodes.borrow();
            if axis == 0 {
                let mut at = 0;
                for p in parts {
                    let d = &nodes[p.id].data;
                    out[at..at + d.len()].copy_from_slice(d);
                    at += d.len();
                }
            } else {
                let mut col_at = 0;
                for (p, s) in parts.iter().zip(&shapes) {
                    let d = &nodes[p.id].data;
                    let pc = s[1];
                    for r in 0..rows {
                        out[r * cols + col_at..r * cols + col_at + pc]
                            .copy_from_slice(&d[r * pc..(r + 1) * pc]);
                    }
                    col_at += pc;
                }
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(vec![rows, cols], out, Op::Concat2 { parts: ids, axis }))
    }

    /// Copy a value out of the tape as a plain tensor.
    pub fn tensor(&self, v: Value<'_>) -> super::Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        super::Tensor::from_vec(&n.shape, n.data.clone()).expect("tape node is consistent")
    }

    pub fn item(&self, v: Value<'_>) -> f32 {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        assert_eq!(n.data.len(), 1, "item() on non-scalar node");
        n.data[0]
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node
    /// reachable from `loss`; query leaves through [`Grads`].
    pub fn backward(&self, loss: Value<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut bufs: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        bufs[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let dy = match bufs[id].take() {
                Some(g) => g,
                None => continue,
            };
            backward_step(&nodes, id, &dy, &mut bufs);
            bufs[id] = Some(dy);
        }
        Ok(Grads { bufs })
    }
}

/// Ensure a gradient buffer exists for `id` and return it.
fn gbuf<'a>(bufs: &'a mut [Option<Vec<f32>>], id: usize, len: usize) -> &'a mut [f32] {
    if bufs[id].is_none() {
        bufs[id] = Some(vec![0.0; len]);
    }
    bufs[id].as_mut().unwrap()
}

impl<'t> Value<'t> {
    /// Node index on the tape (used by tests asserting leaf identity).
    #[allow(dead_code)]
    pub(crate) fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    fn with_data<R>(&self, f: impl FnOnce(&[usize], &[f32]) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        f(&n.shape, &n.data)
    }

    fn unary_map(
        self,
        kind: UnaryKind,
        name: &str,
        f: impl Fn(f32) -> f32,
    ) -> Result<Value<'t>> {
        let (shape, out) = self.with_data(|s, d| (s.to_vec(), d.iter().map(|&v| f(v)).collect::<Vec<f32>>()));
        check_finite(&out, name)?;
        Ok(self.tape.push(shape, out, Op::Unary { kind, x: self.id }))
    }

    pub fn relu(self) -> Result<Value<'t>> {
        self.unary_map(UnaryKind::Relu, "relu", |v| v.max(0.0))
    }

    pub fn sigmoid(self) -> Result<Value<'t>> {
        self.unary_map(UnaryKind::Sigmoid, "sigmoid", stable_sigmoid)
    }

    pub fn exp(self) -> Result<Value<'t>> {
        self.unary_map(UnaryKind::Exp, "exp", f32::exp)
    }

    pub fn neg(self) -> Result<Value<'t>> {
        self.unary_map(UnaryKind::Neg, "neg", |v| -v)
    }

    /// Natural log. Non-positive inputs produce a non-finite error; clamp
    /// first when the argument can reach zero.
    pub fn ln(self) -> Result<Value<'t>> {
        self.unary_map(UnaryKind::Ln, "ln", f32::ln)
    }

    pub fn powf(self, e: f32) -> Result<Value<'t>> {
        let (shape, out) = self.with_data(|s, d| {
            (s.to_vec(), d.iter().map(|&v| v.powf(e)).collect::<Vec<f32>>())
        });
        check_finite(&out, "powf")?;
        Ok(self.tape.push(shape, out, Op::PowScalar { x: self.id, e }))
    }

    pub fn clamp_min(self, floor: f32) -> Result<Value<'t>> {
        let (shape, out) = self.with_data(|s, d| {
            (s.to_vec(), d.iter().map(|&v| v.max(floor)).collect::<Vec<f32>>())
        });
        check_finite(&out, "clamp_min")?;
        Ok(self
            .tape
            .push(shape, out, Op::ClampMin { x: self.id, floor }))
    }

    pub fn mul_scalar(self, c: f32) -> Result<Value<'t>> {
        let (shape, out) = self.with_data(|s, d| {
            (s.to_vec(), d.iter().map(|&v| v * c).collect::<Vec<f32>>())
        });
        check_finite(&out, "mul_scalar")?;
        Ok(self.tape.push(shape, out, Op::MulScalar { x: self.id, c }))
    }

    pub fn add_scalar(self, c: f32) -> Result<Value<'t>> {
        let (shape, out) = self.with_data(|s, d| {
            (s.to_vec(), d.iter().map(|&v| v + c).collect::<Vec<f32>>())
        });
        check_finite(&out, "add_scalar")?;
        Ok(self.tape.push(shape, out, Op::AddScalar { x: self.id }))
    }

    fn binary(self, other: Value<'t>, kind: BinKind, name: &str) -> Result<Value<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (sa, da) = (&nodes[self.id].shape, &nodes[self.id].data);
        let (sb, db) = (&nodes[other.id].shape, &nodes[other.id].data);
        let out_shape = broadcast_shape(sa, sb)?;
        if kind == BinKind::Div && db.iter().any(|&v| v == 0.0) {
            return Err(Error::Invalid("division by zero".into()));
        }
        let f = |a: f32, b: f32| match kind {
            BinKind::Add => a + b,
            BinKind::Sub => a - b,
            BinKind::Mul => a * b,
            BinKind::Div => a / b,
        };
        let mut out = vec![0.0f32; out_shape.iter().product()];
        if sa == sb {
            for ((o, &a), &b) in out.iter_mut().zip(da.iter()).zip(db.iter()) {
                *o = f(a, b);
            }
        } else {
            for_each_broadcast(&out_shape, sa, sb, |oi, ai, bi| {
                out[oi] = f(da[ai], db[bi]);
            });
        }
        drop(nodes);
        check_finite(&out, name)?;
        Ok(self.tape.push(
            out_shape,
            out,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn add(self, other: Value<'t>) -> Result<Value<'t>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(self, other: Value<'t>) -> Result<Value<'t>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(self, other: Value<'t>) -> Result<Value<'t>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(self, other: Value<'t>) -> Result<Value<'t>> {
        self.binary(other, BinKind::Div, "div")
    }

    /// 2-D matrix product `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(self, other: Value<'t>) -> Result<Value<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (sa, da) = (&nodes[self.id].shape, &nodes[self.id].data);
        let (sb, db) = (&nodes[other.id].shape, &nodes[other.id].data);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("matmul wants 2-D, got {sa:?} x {sb:?}")));
        }
        if sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        matmul_acc(da, db, m, k, n, &mut out);
        drop(nodes);
        check_finite(&out, "matmul")?;
        Ok(self.tape.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// 2-D cross-correlation over `[C_in, H, W]` with weights
    /// `[C_out, C_in/groups, k, k]` and zero padding. `groups == C_in` with
    /// single-channel weight groups gives a depthwise convolution.
    pub fn conv2d(
        self,
        w: Value<'t>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Value<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (sx, dx) = (&nodes[self.id].shape, &nodes[self.id].data);
        let (sw, dw) = (&nodes[w.id].shape, &nodes[w.id].data);
        let geo = ConvGeom::check(sx, sw, stride, pad, groups)?;
        let mut out = vec![0.0f32; geo.cout * geo.ho * geo.wo];
        conv2d_forward(dx, dw, &geo, &mut out);
        drop(nodes);
        check_finite(&out, "conv2d")?;
        Ok(self.tape.push(
            vec![geo.cout, geo.ho, geo.wo],
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                stride,
                pad,
                groups,
            },
        ))
    }

    /// Transposed convolution with a fixed 2x2 kernel and stride 2: exact
    /// spatial doubling. Weights are `[C_in, C_out, 2, 2]`.
    pub fn conv_transpose2x(self, w: Value<'t>) -> Result<Value<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (sx, dx) = (&nodes[self.id].shape, &nodes[self.id].data);
        let (sw, dw) = (&nodes[w.id].shape, &nodes[w.id].data);
        if sx.len() != 3 {
            return Err(Error::Shape(format!("conv_transpose2x wants [C,H,W], got {sx:?}")));
        }
        if sw.len() != 4 || sw[0] != sx[0] || sw[2] != 2 || sw[3] != 2 {
            return Err(Error::Shape(format!(
                "conv_transpose2x weights want [{},C_out,2,2], got {sw:?}",
                sx[0]
            )));
        }
        let (cin, h, wdt) = (sx[0], sx[1], sx[2]);
        let cout = sw[1];
        let mut out = vec![0.0f32; cout * 2 * h * 2 * wdt];
        for oc in 0..cout {
            for i in 0..h {
                for j in 0..wdt {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let mut acc = 0.0f32;
                            for ic in 0..cin {
                                acc += dx[(ic * h + i) * wdt + j]
                                    * dw[((ic * cout + oc) * 2 + ky) * 2 + kx];
                            }
                            out[(oc * 2 * h + 2 * i + ky) * 2 * wdt + 2 * j + kx] = acc;
                        }
                    }
                }
            }
        }
        drop(nodes);
        check_finite(&out, "conv_transpose2x")?;
        Ok(self.tape.push(
            vec![cout, 2 * h, 2 * wdt],
            out,
            Op::ConvTranspose2x { x: self.id, w: w.id },
        ))
    }

    /// Depthwise odd-kernel convolution with edge-replicate padding, stride 1.
    /// Weights are `[C, k, k]`. Used for multi-scale token aggregation, where
    /// a uniform kernel must preserve constant maps at the borders.
    pub fn dwconv_repl(self, w: Value<'t>) -> Result<Value<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (sx, dx) = (&nodes[self.id].shape, &nodes[self.id].data);
        let (sw, dw) = (&nodes[w.id].shape, &nodes[w.id].data);
        if sx.len() != 3 {
            return Err(Error::Shape(format!("dwconv_repl wants [C,H,W], got {sx:?}")));
        }
        if sw.len() != 3 || sw[0] != sx[0] || sw[1] != sw[2] || sw[1] % 2 == 0 {
            return Err(Error::Shape(format!(
                "dwconv_repl weights want [{},k,k] with odd k, got {sw:?}",
                sx[0]
            )));
        }
        let (c, h, wdt) = (sx[0], sx[1], sx[2]);
        let k = sw[1];
        let r = k / 2;
        let mut out = vec![0.0f32; c * h * wdt];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..wdt {
                    let mut acc = 0.0f32;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (i + ky).saturating_sub(r).min(h - 1);
                            let ix = (j + kx).saturating_sub(r).min(wdt - 1);
                            acc += dw[(ch * k + ky) * k + kx] * dx[(ch * h + iy) * wdt + ix];
                        }
                    }
                    out[(ch * h + i) * wdt + j] = acc;
                }
            }
        }
        drop(nodes);
        check_finite(&out, "dwconv_repl")?;
        Ok(self.tape.push(
            vec![c, h, wdt],
            out,
            Op::DwConvRepl { x: self.id, w: w.id },
        ))
    }

    /// Inference-mode batch normalization over the channel axis of `[C,H,W]`,
    /// using stored statistics: `(x - mean) / sqrt(var + eps) * scale + shift`.
    pub fn batchnorm_infer(
        self,
        mean: Value<'t>,
        var: Value<'t>,
        scale: Value<'t>,
        shift: Value<'t>,
        eps: f32,
    ) -> Result<Value<'t>> {
        if eps <= 0.0 {
            return Err(Error::Invalid(format!("batchnorm eps must be > 0, got {eps}")));
        }
        let nodes = self.tape.nodes.borrow();
        let sx = &nodes[self.id].shape;
        if sx.len() != 3 {
            return Err(Error::Shape(format!("batchnorm_infer wants [C,H,W], got {sx:?}")));
        }
        let c = sx[0];
        for (v, what) in [(mean, "mean"), (var, "var"), (scale, "scale"), (shift, "shift")] {
            let s = &nodes[v.id].shape;
            if nodes[v.id].data.len() != c {
                return Err(Error::Shape(format!(
                    "batchnorm {what} wants {c} elements, got shape {s:?}"
                )));
            }
        }
        let hw = sx[1] * sx[2];
        let dx = &nodes[self.id].data;
        let (dm, dv) = (&nodes[mean.id].data, &nodes[var.id].data);
        let (ds, db) = (&nodes[scale.id].data, &nodes[shift.id].data);
        let mut out = vec![0.0f32; c * hw];
        for ch in 0..c {
            let inv = 1.0 / (dv[ch] + eps).sqrt();
            for p in 0..hw {
                out[ch * hw + p] = (dx[ch * hw + p] - dm[ch]) * inv * ds[ch] + db[ch];
            }
        }
        let shape = sx.clone();
        drop(nodes);
        check_finite(&out, "batchnorm_infer")?;
        Ok(self.tape.push(
            shape,
            out,
            Op::BatchNormInfer {
                x: self.id,
                mean: mean.id,
                var: var.id,
                scale: scale.id,
                shift: shift.id,
                eps,
            },
        ))
    }

    /// Layer normalization along one axis; `scale`/`shift` have length
    /// `shape[axis]`. Statistics are computed per position over that axis.
    pub fn layernorm(
        self,
        scale: Value<'t>,
        shift: Value<'t>,
        eps: f32,
        axis: usize,
    ) -> Result<Value<'t>> {
        if eps <= 0.0 {
            return Err(Error::Invalid(format!("layernorm eps must be > 0, got {eps}")));
        }
        let nodes = self.tape.nodes.borrow();
        let sx = &nodes[self.id].shape;
        if axis >= sx.len() {
            return Err(Error::Shape(format!("layernorm axis {axis} out of range for {sx:?}")));
        }
        let n = sx[axis];
        if nodes[scale.id].data.len() != n || nodes[shift.id].data.len() != n {
            return Err(Error::Shape(format!(
                "layernorm scale/shift want {n} elements for axis {axis} of {sx:?}"
            )));
        }
        let geo = AxisGeom::new(sx, axis);
        let dx = &nodes[self.id].data;
        let (ds, db) = (&nodes[scale.id].data, &nodes[shift.id].data);
        let mut out = vec![0.0f32; dx.len()];
        geo.for_each_group(|base, stride| {
            let mut mean = 0.0f32;
            for j in 0..n {
                mean += dx[base + j * stride];
            }
            mean /= n as f32;
            let mut var = 0.0f32;
            for j in 0..n {
                let d = dx[base + j * stride] - mean;
                var += d * d;
            }
            var /= n as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (dx[base + j * stride] - mean) * inv;
                out[base + j * stride] = xhat * ds[j] + db[j];
            }
        });
        let shape = sx.clone();
        drop(nodes);
        check_finite(&out, "layernorm")?;
        Ok(self.tape.push(
            shape,
            out,
            Op::LayerNorm {
                x: self.id,
                scale: scale.id,
                shift: shift.id,
                eps,
                axis,
            },
        ))
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_last(self) -> Result<Value<'t>> {
        let nodes = self.tape.nodes.borrow();
        let sx = &nodes[self.id].shape;
        let n = *sx.last().ok_or_else(|| Error::Shape("softmax on rank-0".into()))?;
        let dx = &nodes[self.id].data;
        let mut out = vec![0.0f32; dx.len()];
        for row in 0..dx.len() / n {
            let xs = &dx[row * n..(row + 1) * n];
            let m = xs.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0f32;
            for (o, &x) in out[row * n..(row + 1) * n].iter_mut().zip(xs) {
                *o = (x - m).exp();
                sum += *o;
            }
            for o in &mut out[row * n..(row + 1) * n] {
                *o /= sum;
            }
        }
        let shape = sx.clone();
        drop(nodes);
        check_finite(&out, "softmax")?;
        Ok(self.tape.push(shape, out, Op::SoftmaxLast { x: self.id }))
    }

    /// Nearest-neighbor 2x upsampling of `[C,H,W]`: each pixel replicated 2x2.
    pub fn upsample2x(self) -> Result<Value<'t>> {
        let nodes = self.tape.nodes.borrow();
        let sx = &nodes[self.id].shape;
        if sx.len() != 3 {
            return Err(Error::Shape(format!("upsample2x wants [C,H,W], got {sx:?}")));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let dx = &nodes[self.id].data;
        let mut out = vec![0.0f32; c * 4 * h * w];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = dx[(ch * h + i) * w + j];
                    for ky in 0..2 {
                        for kx in 0..2 {
                            out[(ch * 2 * h + 2 * i + ky) * 2 * w + 2 * j + kx] = v;
                        }
                    }
                }
            }
        }
        drop(nodes);
        Ok(self.tape.push(
            vec![c, 2 * h, 2 * w],
            out,
            Op::Upsample2x { x: self.id },
        ))
    }

    /// Exact stride-2 subsample of `[C,H,W]` (top-left phase). A stride-1
    /// convolution followed by this op equals a floor-semantics stride-2
    /// convolution; the strict conv2d contract cannot express stride 2 with
    /// an odd kernel on even inputs, so downsampling blocks use this.
    pub fn downsample2x(self) -> Result<Value<'t>> {
        let nodes = self.tape.nodes.borrow();
        let sx = &nodes[self.id].shape;
        if sx.len() != 3 || sx[1] % 2 != 0 || sx[2] % 2 != 0 {
            return Err(Error::Shape(format!(
                "downsample2x wants [C,even,even], got {sx:?}"
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let dx = &nodes[self.id].data;
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0f32; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[(ch * ho + i) * wo + j] = dx[(ch * h + 2 * i) * w + 2 * j];
                }
            }
        }
        drop(nodes);
        Ok(self.tape.push(
            vec![c, ho, wo],
            out,
            Op::Downsample2x { x: self.id },
        ))
    }

    pub fn sum_all(self) -> Result<Value<'t>> {
        let s: f32 = self.with_data(|_, d| d.iter().sum());
        check_finite(&[s], "sum_all")?;
        Ok(self.tape.push(vec![1], vec![s], Op::SumAll { x: self.id }))
    }

    pub fn mean_all(self) -> Result<Value<'t>> {
        let (n, s) = self.with_data(|_, d| (d.len(), d.iter().sum::<f32>()));
        let m = s / n as f32;
        check_finite(&[m], "mean_all")?;
        Ok(self.tape.push(vec![1], vec![m], Op::MeanAll { x: self.id }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Value<'t>> {
        let (old, data) = self.with_data(|s, d| (s.to_vec(), d.to_vec()));
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("reshape {old:?} -> {shape:?}")));
        }
        Ok(self
            .tape
            .push(shape.to_vec(), data, Op::Reshape { x: self.id }))
    }

    /// Transpose a 2-D value.
    pub fn transpose2(self) -> Result<Value<'t>> {
        let nodes = self.tape.nodes.borrow();
        let sx = &nodes[self.id].shape;
        if sx.len() != 2 {
            return Err(Error::Shape(format!("transpose2 wants 2-D, got {sx:?}")));
        }
        let (m, n) = (sx[0], sx[1]);
        let dx = &nodes[self.id].data;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = dx[i * n + j];
            }
        }
        drop(nodes);
        Ok(self.tape.push(vec![n, m], out, Op::Transpose2 { x: self.id }))
    }

    /// Slice a 2-D value along `axis`, keeping `from..to`.
    pub fn slice2(self, axis: usize, from: usize, to: usize) -> Result<Value<'t>> {
        let nodes = self.tape.nodes.borrow();
        let sx = &nodes[self.id].shape;
        if sx.len() != 2 || axis > 1 {
            return Err(Error::Shape(format!("slice2 wants 2-D and axis 0|1, got {sx:?} axis {axis}")));
        }
        if from >= to || to > sx[axis] {
            return Err(Error::Shape(format!(
                "slice2 range {from}..{to} out of bounds for dim {}",
                sx[axis]
            )));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let dx = &nodes[self.id].data;
        let out_shape = if axis == 0 {
            vec![to - from, cols]
        } else {
            vec![rows, to - from]
        };
        let mut out = vec![0.0f32; out_shape.iter().product()];
        if axis == 0 {
            out.copy_from_slice(&dx[from * cols..to * cols]);
        } else {
            for r in 0..rows {
                out[r * (to - from)..(r + 1) * (to - from)]
                    .copy_from_slice(&dx[r * cols + from..r * cols + to]);
            }
        }
        drop(nodes);
        Ok(self.tape.push(
            out_shape,
            out,
            Op::Slice2 {
                x: self.id,
                axis,
                from,
                to,
            },
        ))
    }
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── Broadcast helpers ───────────────────────────────────────────────

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "broadcast wants equal rank, got {a:?} vs {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&da, &db)| {
            if da == db || da == 1 || db == 1 {
                Ok(da.max(db))
            } else {
                Err(Error::Shape(format!("incompatible shapes {a:?} vs {b:?}")))
            }
        })
        .collect()
}

/// Iterate output indices of a broadcast op together with the mapped flat
/// indices into each operand (stride 0 along expanded dims).
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let mut stride_a = vec![0usize; rank];
    let mut stride_b = vec![0usize; rank];
    let mut acc_a = 1;
    let mut acc_b = 1;
    for d in (0..rank).rev() {
        stride_a[d] = if sa[d] == 1 { 0 } else { acc_a };
        stride_b[d] = if sb[d] == 1 { 0 } else { acc_b };
        acc_a *= sa[d];
        acc_b *= sb[d];
    }
    let total: usize = out.iter().product();
    let mut coords = vec![0usize; rank];
    let mut ai = 0usize;
    let mut bi = 0usize;
    for oi in 0..total {
        f(oi, ai, bi);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ai += stride_a[d];
            bi += stride_b[d];
            if coords[d] < out[d] {
                break;
            }
            coords[d] = 0;
            ai -= stride_a[d] * out[d];
            bi -= stride_b[d] * out[d];
        }
    }
}

// ── Matmul kernels (fixed accumulation order over the contraction) ──

/// `out += A[m,k] x B[k,n]`, accumulating over k in ascending order.
pub(crate) fn matmul_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += A[m,k] x B^T` where B is `[n,k]`.
fn matmul_abt_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += A^T x B` where A is `[k,m]` and B is `[k,n]`.
fn matmul_atb_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), m * n);
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// ── Convolution ─────────────────────────────────────────────────────

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn check(sx: &[usize], sw: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        if sx.len() != 3 {
            return Err(Error::Shape(format!("conv2d input wants [C,H,W], got {sx:?}")));
        }
        if sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::Shape(format!(
                "conv2d weights want [C_out,C_in/g,k,k], got {sw:?}"
            )));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, wc, k) = (sw[0], sw[1], sw[2]);
        if k % 2 == 0 {
            return Err(Error::Shape(format!("conv2d kernel size must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be >= 1".into()));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Shape(format!(
                "conv2d groups {groups} must divide C_in {cin} and C_out {cout}"
            )));
        }
        if wc != cin / groups {
            return Err(Error::Shape(format!(
                "conv2d weight channel dim {wc} != C_in/groups {}",
                cin / groups
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv2d kernel {k} larger than padded input {h}x{w}+2*{pad}"
            )));
        }
        if (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 {
            return Err(Error::Shape(format!(
                "conv2d output size not integral for {h}x{w}, k={k}, stride={stride}, pad={pad}"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            groups,
            ho,
            wo,
        })
    }

    fn cing(&self) -> usize {
        self.cin / self.groups
    }

    fn cog(&self) -> usize {
        self.cout / self.groups
    }
}

/// Lower one group's input channels into a `[cing*k*k, ho*wo]` patch matrix.
/// Rows are ordered (channel, ky, kx) ascending so the matmul accumulation
/// visits taps in the same order as the naive nested-loop definition.
fn im2col(x: &[f32], geo: &ConvGeom, group: usize) -> Vec<f32> {
    let (k, ho, wo) = (geo.k, geo.ho, geo.wo);
    let cing = geo.cing();
    let mut cols = vec![0.0f32; cing * k * k * ho * wo];
    for c in 0..cing {
        let xch = &x[(group * cing + c) * geo.h * geo.w..(group * cing + c + 1) * geo.h * geo.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.w as isize {
                            dst[oy * wo + ox] = xch[iy as usize * geo.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn conv2d_forward(x: &[f32], w: &[f32], geo: &ConvGeom, out: &mut [f32]) {
    let (cog, cing, k) = (geo.cog(), geo.cing(), geo.k);
    let hw = geo.ho * geo.wo;
    for g in 0..geo.groups {
        let cols = im2col(x, geo, g);
        let wg = &w[g * cog * cing * k * k..(g + 1) * cog * cing * k * k];
        let og = &mut out[g * cog * hw..(g + 1) * cog * hw];
        matmul_acc(wg, &cols, cog, cing * k * k, hw, og);
    }
}

fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    geo: &ConvGeom,
    dx: &mut [f32],
    dw: &mut [f32],
) {
    let (cog, cing, k) = (geo.cog(), geo.cing(), geo.k);
    let hw = geo.ho * geo.wo;
    let taps = cing * k * k;
    for g in 0..geo.groups {
        let cols = im2col(x, geo, g);
        let wg = &w[g * cog * taps..(g + 1) * cog * taps];
        let dyg = &dy[g * cog * hw..(g + 1) * cog * hw];
        // dW_g += dY_g x cols^T
        matmul_abt_acc(
            dyg,
            &cols,
            cog,
            hw,
            taps,
            &mut dw[g * cog * taps..(g + 1) * cog * taps],
        );
        // dcols = W_g^T x dY_g, then scatter back through the patch map.
        let mut dcols = vec![0.0f32; taps * hw];
        matmul_atb_acc(wg, dyg, taps, cog, hw, &mut dcols);
        for c in 0..cing {
            let dxch_base = (g * cing + c) * geo.h * geo.w;
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &dcols[row * hw..(row + 1) * hw];
                    for oy in 0..geo.ho {
                        let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                        if iy < 0 || iy >= geo.h as isize {
                            continue;
                        }
                        for ox in 0..geo.wo {
                            let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                            if ix >= 0 && ix < geo.w as isize {
                                dx[dxch_base + iy as usize * geo.w + ix as usize] +=
                                    src[oy * geo.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── Axis geometry for layernorm ─────────────────────────────────────

struct AxisGeom {
    outer: usize,
    n: usize,
    inner: usize,
}

impl AxisGeom {
    fn new(shape: &[usize], axis: usize) -> Self {
        AxisGeom {
            outer: shape[..axis].iter().product(),
            n: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    /// Visit each normalization group as (base offset, stride along axis).
    fn for_each_group(&self, mut f: impl FnMut(usize, usize)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                f(o * self.n * self.inner + i, self.inner);
            }
        }
    }
}

// ── Backward rules ──────────────────────────────────────────────────

fn backward_step(nodes: &[Node], id: usize, dy: &[f32], bufs: &mut [Option<Vec<f32>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Unary { kind, x } => {
            let xd = &nodes[*x].data;
            let yd = &node.data;
            let g = gbuf(bufs, *x, xd.len());
            match kind {
                UnaryKind::Relu => {
                    for i in 0..xd.len() {
                        if xd[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                }
                UnaryKind::Sigmoid => {
                    for i in 0..xd.len() {
                        g[i] += dy[i] * yd[i] * (1.0 - yd[i]);
                    }
                }
                UnaryKind::Exp => {
                    for i in 0..xd.len() {
                        g[i] += dy[i] * yd[i];
                    }
                }
                UnaryKind::Neg => {
                    for i in 0..xd.len() {
                        g[i] -= dy[i];
                    }
                }
                UnaryKind::Ln => {
                    for i in 0..xd.len() {
                        g[i] += dy[i] / xd[i];
                    }
                }
            }
        }
        Op::PowScalar { x, e } => {
            let xd = &nodes[*x].data;
            let g = gbuf(bufs, *x, xd.len());
            for i in 0..xd.len() {
                g[i] += dy[i] * e * xd[i].powf(e - 1.0);
            }
        }
        Op::ClampMin { x, floor } => {
            let xd = &nodes[*x].data;
            let g = gbuf(bufs, *x, xd.len());
            for i in 0..xd.len() {
                if xd[i] > *floor {
                    g[i] += dy[i];
                }
            }
        }
        Op::MulScalar { x, c } => {
            let g = gbuf(bufs, *x, nodes[*x].data.len());
            for i in 0..g.len() {
                g[i] += dy[i] * c;
            }
        }
        Op::AddScalar { x } => {
            let g = gbuf(bufs, *x, nodes[*x].data.len());
            for i in 0..g.len() {
                g[i] += dy[i];
            }
        }
        Op::Binary { kind, a, b } => {
            let (sa, da) = (&nodes[*a].shape, &nodes[*a].data);
            let (sb, db) = (&nodes[*b].shape, &nodes[*b].data);
            let out_shape = &node.shape;
            let same = sa == sb;
            {
                let ga = gbuf(bufs, *a, da.len());
                match kind {
                    BinKind::Add => bcast_acc(out_shape, sa, sb, same, |oi, ai, _| ga[ai] += dy[oi]),
                    BinKind::Sub => bcast_acc(out_shape, sa, sb, same, |oi, ai, _| ga[ai] += dy[oi]),
                    BinKind::Mul => {
                        bcast_acc(out_shape, sa, sb, same, |oi, ai, bi| ga[ai] += dy[oi] * db[bi])
                    }
                    BinKind::Div => {
                        bcast_acc(out_shape, sa, sb, same, |oi, ai, bi| ga[ai] += dy[oi] / db[bi])
                    }
                }
            }
            {
                let gb = gbuf(bufs, *b, db.len());
                match kind {
                    BinKind::Add => bcast_acc(out_shape, sa, sb, same, |oi, _, bi| gb[bi] += dy[oi]),
                    BinKind::Sub => bcast_acc(out_shape, sa, sb, same, |oi, _, bi| gb[bi] -= dy[oi]),
                    BinKind::Mul => {
                        bcast_acc(out_shape, sa, sb, same, |oi, ai, bi| gb[bi] += dy[oi] * da[ai])
                    }
                    BinKind::Div => bcast_acc(out_shape, sa, sb, same, |oi, ai, bi| {
                        gb[bi] -= dy[oi] * da[ai] / (db[bi] * db[bi])
                    }),
                }
            }
        }
        Op::MatMul { a, b } => {
            let (sa, da) = (&nodes[*a].shape, &nodes[*a].data);
            let (sb, db) = (&nodes[*b].shape, &nodes[*b].data);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            matmul_abt_acc(dy, db, m, n, k, gbuf(bufs, *a, da.len()));
            matmul_atb_acc(da, dy, k, m, n, gbuf(bufs, *b, db.len()));
        }
        Op::Conv2d {
            x,
            w,
            stride,
            pad,
            groups,
        } => {
            let (sx, dx_data) = (&nodes[*x].shape, &nodes[*x].data);
            let (sw, dw_data) = (&nodes[*w].shape, &nodes[*w].data);
            let geo = ConvGeom::check(sx, sw, *stride, *pad, *groups).expect("checked at forward");
            // Split-borrow the two gradient buffers.
            let mut dxg = bufs[*x].take().unwrap_or_else(|| vec![0.0; dx_data.len()]);
            let mut dwg = bufs[*w].take().unwrap_or_else(|| vec![0.0; dw_data.len()]);
            conv2d_backward(dx_data, dw_data, dy, &geo, &mut dxg, &mut dwg);
            bufs[*x] = Some(dxg);
            bufs[*w] = Some(dwg);
        }
        Op::ConvTranspose2x { x, w } => {
            let (sx, xd) = (&nodes[*x].shape, &nodes[*x].data);
            let sw = &nodes[*w].shape;
            let wd = &nodes[*w].data;
            let (cin, h, wdt) = (sx[0], sx[1], sx[2]);
            let cout = sw[1];
            {
                let gx = gbuf(bufs, *x, xd.len());
                for ic in 0..cin {
                    for i in 0..h {
                        for j in 0..wdt {
                            let mut acc = 0.0f32;
                            for oc in 0..cout {
                                for ky in 0..2 {
                                    for kx in 0..2 {
                                        acc += dy[(oc * 2 * h + 2 * i + ky) * 2 * wdt + 2 * j + kx]
                                            * wd[((ic * cout + oc) * 2 + ky) * 2 + kx];
                                    }
                                }
                            }
                            gx[(ic * h + i) * wdt + j] += acc;
                        }
                    }
                }
            }
            {
                let gw = gbuf(bufs, *w, wd.len());
                for ic in 0..cin {
                    for oc in 0..cout {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let mut acc = 0.0f32;
                                for i in 0..h {
                                    for j in 0..wdt {
                                        acc += xd[(ic * h + i) * wdt + j]
                                            * dy[(oc * 2 * h + 2 * i + ky) * 2 * wdt + 2 * j + kx];
                                    }
                                }
                                gw[((ic * cout + oc) * 2 + ky) * 2 + kx] += acc;
                            }
                        }
                    }
                }
            }
        }
        Op::DwConvRepl { x, w } => {
            let (sx, xd) = (&nodes[*x].shape, &nodes[*x].data);
            let sw = &nodes[*w].shape;
            let wd = &nodes[*w].data;
            let (c, h, wdt) = (sx[0], sx[1], sx[2]);
            let k = sw[1];
            let r = k / 2;
            {
                let gx = gbuf(bufs, *x, xd.len());
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..wdt {
                            let d = dy[(ch * h + i) * wdt + j];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (i + ky).saturating_sub(r).min(h - 1);
                                    let ix = (j + kx).saturating_sub(r).min(wdt - 1);
                                    gx[(ch * h + iy) * wdt + ix] += d * wd[(ch * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
            {
                let gw = gbuf(bufs, *w, wd.len());
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0f32;
                            for i in 0..h {
                                for j in 0..wdt {
                                    let iy = (i + ky).saturating_sub(r).min(h - 1);
                                    let ix = (j + kx).saturating_sub(r).min(wdt - 1);
                                    acc += xd[(ch * h + iy) * wdt + ix]
                                        * dy[(ch * h + i) * wdt + j];
                                }
                            }
                            gw[(ch * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        }
        Op::BatchNormInfer {
            x,
            mean,
            var,
            scale,
            shift,
            eps,
        } => {
            let xd = &nodes[*x].data;
            let (md, vd) = (&nodes[*mean].data, &nodes[*var].data);
            let sd = &nodes[*scale].data;
            let c = md.len();
            let hw = xd.len() / c;
            {
                let gx = gbuf(bufs, *x, xd.len());
                for ch in 0..c {
                    let coef = sd[ch] / (vd[ch] + eps).sqrt();
                    for p in 0..hw {
                        gx[ch * hw + p] += dy[ch * hw + p] * coef;
                    }
                }
            }
            {
                let gm = gbuf(bufs, *mean, c);
                for ch in 0..c {
                    let coef = sd[ch] / (vd[ch] + eps).sqrt();
                    let mut acc = 0.0f32;
                    for p in 0..hw {
                        acc += dy[ch * hw + p];
                    }
                    gm[ch] -= acc * coef;
                }
            }
            {
                let gv = gbuf(bufs, *var, c);
                for ch in 0..c {
                    let inv32 = (vd[ch] + eps).sqrt().recip();
                    let mut acc = 0.0f32;
                    for p in 0..hw {
                        acc += dy[ch * hw + p] * (xd[ch * hw + p] - md[ch]);
                    }
                    gv[ch] += acc * sd[ch] * -0.5 * inv32 * inv32 * inv32;
                }
            }
            {
                let gs = gbuf(bufs, *scale, c);
                for ch in 0..c {
                    let inv = (vd[ch] + eps).sqrt().recip();
                    let mut acc = 0.0f32;
                    for p in 0..hw {
                        acc += dy[ch * hw + p] * (xd[ch * hw + p] - md[ch]) * inv;
                    }
                    gs[ch] += acc;
                }
            }
            {
                let gb = gbuf(bufs, *shift, c);
                for ch in 0..c {
                    let mut acc = 0.0f32;
                    for p in 0..hw {
                        acc += dy[ch * hw + p];
                    }
                    gb[ch] += acc;
                }
            }
        }
        Op::LayerNorm {
            x,
            scale,
            shift,
            eps,
            axis,
        } => {
            let (sx, xd) = (&nodes[*x].shape, &nodes[*x].data);
            let sd = &nodes[*scale].data;
            let geo = AxisGeom::new(sx, *axis);
            let n = geo.n;
            let nf = n as f32;
            {
                let gx = gbuf(bufs, *x, xd.len());
                geo.for_each_group(|base, stride| {
                    let mut mean = 0.0f32;
                    for j in 0..n {
                        mean += xd[base + j * stride];
                    }
                    mean /= nf;
                    let mut var = 0.0f32;
                    for j in 0..n {
                        let d = xd[base + j * stride] - mean;
                        var += d * d;
                    }
                    var /= nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    // dxhat_j = dy_j * scale_j
                    let mut dvar = 0.0f32;
                    let mut dmean = 0.0f32;
                    for j in 0..n {
                        let dxh = dy[base + j * stride] * sd[j];
                        let xm = xd[base + j * stride] - mean;
                        dvar += dxh * xm * -0.5 * inv * inv * inv;
                        dmean += -dxh * inv;
                    }
                    let mut xm_sum = 0.0f32;
                    for j in 0..n {
                        xm_sum += xd[base + j * stride] - mean;
                    }
                    dmean += dvar * -2.0 * xm_sum / nf;
                    for j in 0..n {
                        let dxh = dy[base + j * stride] * sd[j];
                        let xm = xd[base + j * stride] - mean;
                        gx[base + j * stride] += dxh * inv + dvar * 2.0 * xm / nf + dmean / nf;
                    }
                });
            }
            {
                let gs = gbuf(bufs, *scale, n);
                geo.for_each_group(|base, stride| {
                    let mut mean = 0.0f32;
                    for j in 0..n {
                        mean += xd[base + j * stride];
                    }
                    mean /= nf;
                    let mut var = 0.0f32;
                    for j in 0..n {
                        let d = xd[base + j * stride] - mean;
                        var += d * d;
                    }
                    var /= nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..n {
                        gs[j] += dy[base + j * stride] * (xd[base + j * stride] - mean) * inv;
                    }
                });
            }
            {
                let gb = gbuf(bufs, *shift, n);
                geo.for_each_group(|base, stride| {
                    for j in 0..n {
                        gb[j] += dy[base + j * stride];
                    }
                });
            }
        }
        Op::SoftmaxLast { x } => {
            let yd = &node.data;
            let n = *node.shape.last().unwrap();
            let gx = gbuf(bufs, *x, yd.len());
            for row in 0..yd.len() / n {
                let ys = &yd[row * n..(row + 1) * n];
                let dys = &dy[row * n..(row + 1) * n];
                let mut dot = 0.0f32;
                for j in 0..n {
                    dot += dys[j] * ys[j];
                }
                for j in 0..n {
                    gx[row * n + j] += ys[j] * (dys[j] - dot);
                }
            }
        }
        Op::Upsample2x { x } => {
            let sx = &nodes[*x].shape;
            let (c, h, w) = (sx[0], sx[1], sx[2]);
            let gx = gbuf(bufs, *x, c * h * w);
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0f32;
                        for ky in 0..2 {
                            for kx in 0..2 {
                                acc += dy[(ch * 2 * h + 2 * i + ky) * 2 * w + 2 * j + kx];
                            }
                        }
                        gx[(ch * h + i) * w + j] += acc;
                    }
                }
            }
        }
        Op::Downsample2x { x } => {
            let sx = &nodes[*x].shape;
            let (c, h, w) = (sx[0], sx[1], sx[2]);
            let (ho, wo) = (h / 2, w / 2);
            let gx = gbuf(bufs, *x, c * h * w);
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        gx[(ch * h + 2 * i) * w + 2 * j] += dy[(ch * ho + i) * wo + j];
                    }
                }
            }
        }
        Op::SumAll { x } => {
            let gx = gbuf(bufs, *x, nodes[*x].data.len());
            for g in gx.iter_mut() {
                *g += dy[0];
            }
        }
        Op::MeanAll { x } => {
            let len = nodes[*x].data.len();
            let gx = gbuf(bufs, *x, len);
            let d = dy[0] / len as f32;
            for g in gx.iter_mut() {
                *g += d;
            }
        }
        Op::Reshape { x } => {
            let gx = gbuf(bufs, *x, nodes[*x].data.len());
            for i in 0..gx.len() {
                gx[i] += dy[i];
            }
        }
        Op::Transpose2 { x } => {
            let sx = &nodes[*x].shape;
            let (m, n) = (sx[0], sx[1]);
            let gx = gbuf(bufs, *x, m * n);
            for i in 0..m {
                for j in 0..n {
                    gx[i * n + j] += dy[j * m + i];
                }
            }
        }
        Op::Slice2 { x, axis, from, to } => {
            let sx = &nodes[*x].shape;
            let (rows, cols) = (sx[0], sx[1]);
            let gx = gbuf(bufs, *x, rows * cols);
            if *axis == 0 {
                for (i, &d) in dy.iter().enumerate() {
                    gx[from * cols + i] += d;
                }
            } else {
                let width = to - from;
                for r in 0..rows {
                    for j in 0..width {
                        gx[r * cols + from + j] += dy[r * width + j];
                    }
                }
            }
        }
        Op::Concat2 { parts, axis } => {
            let out_cols = node.shape[1];
            let mut at = 0usize;
            for &p in parts {
                let sp = nodes[p].shape.clone();
                let gp = gbuf(bufs, p, sp[0] * sp[1]);
                if *axis == 0 {
                    let len = sp[0] * sp[1];
                    for i in 0..len {
                        gp[i] += dy[at + i];
                    }
                    at += len;
                } else {
                    let pc = sp[1];
                    for r in 0..sp[0] {
                        for j in 0..pc {
                            gp[r * pc + j] += dy[r * out_cols + at + j];
                        }
                    }
                    at += pc;
                }
            }
        }
    }
}

/// Shared iteration for broadcast backward: fast path for equal shapes.
fn bcast_acc(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    same: bool,
    mut f: impl FnMut(usize, usize, usize),
) {
    if same {
        let total: usize = out_shape.iter().product();
        for i in 0..total {
            f(i, i, i);
        }
    } else {
        for_each_broadcast(out_shape, sa, sb, &mut f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t1(data: &[f32]) -> Tensor {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn relu_matches_definition() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[-1.0, 0.0, 2.0])).unwrap();
        let y = x.relu().unwrap();
        assert_eq!(tape.tensor(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[0.0])).unwrap();
        let y = x.sigmoid().unwrap();
        assert_eq!(tape.tensor(y).data(), &[0.5]);
    }

    #[test]
    fn relu_subgradient_zero_at_negative_and_kink() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[-1.0, 2.0])).unwrap();
        let loss = x.relu().unwrap().sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.dense(x), vec![0.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(&t1(&[0.0])).unwrap();
        let loss = x.relu().unwrap().sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.dense(x), vec![0.0], "subgradient 0 at exactly 0");
    }

    #[test]
    fn binary_elementwise_examples() {
        let tape = Tape::new();
        let a = tape.leaf(&t1(&[1.0, 2.0])).unwrap();
        let b = tape.leaf(&t1(&[3.0, 4.0])).unwrap();
        assert_eq!(tape.tensor(a.add(b).unwrap()).data(), &[4.0, 6.0]);

        let c = tape.leaf(&t1(&[2.0, 3.0])).unwrap();
        let d = tape.leaf(&t1(&[0.0, 1.0])).unwrap();
        assert_eq!(tape.tensor(c.mul(d).unwrap()).data(), &[0.0, 3.0]);
    }

    #[test]
    fn div_by_zero_is_an_error() {
        let tape = Tape::new();
        let a = tape.leaf(&t1(&[1.0])).unwrap();
        let b = tape.leaf(&t1(&[0.0])).unwrap();
        assert!(a.div(b).is_err());
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(&Tensor::zeros(&[2, 2])).unwrap();
        assert!(a.add(b).is_err());
    }

    #[test]
    fn broadcast_bias_add_and_backward() {
        let tape = Tape::new();
        let x = tape
            .leaf(&Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        let b = tape
            .leaf(&Tensor::from_vec(&[1, 3], vec![10., 20., 30.]).unwrap())
            .unwrap();
        let y = x.add(b).unwrap();
        assert_eq!(tape.tensor(y).data(), &[11., 22., 33., 14., 25., 36.]);
        let loss = y.sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.dense(b), vec![2.0, 2.0, 2.0], "broadcast dims reduce-sum");
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::new();
        let eye = tape
            .leaf(&Tensor::from_vec(&[2, 2], vec![1., 0., 0., 1.]).unwrap())
            .unwrap();
        let a = tape
            .leaf(&Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap())
            .unwrap();
        assert_eq!(tape.tensor(eye.matmul(a).unwrap()).data(), &[1., 2., 3., 4.]);

        let r = tape
            .leaf(&Tensor::from_vec(&[1, 2], vec![1., 2.]).unwrap())
            .unwrap();
        let c = tape
            .leaf(&Tensor::from_vec(&[2, 1], vec![3., 4.]).unwrap())
            .unwrap();
        assert_eq!(tape.tensor(r.matmul(c).unwrap()).data(), &[11.0]);
    }

    #[test]
    fn matmul_dim_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(&Tensor::zeros(&[2, 3])).unwrap();
        assert!(a.matmul(b).is_err());
    }

    #[test]
    fn conv2d_identity_kernel() {
        let tape = Tape::new();
        let x = tape
            .leaf(&Tensor::from_fn(&[1, 3, 3], |i| i as f32))
            .unwrap();
        let w = tape
            .leaf(&Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap())
            .unwrap();
        let y = x.conv2d(w, 1, 0, 1).unwrap();
        assert_eq!(tape.tensor(y).data(), tape.tensor(x).data());
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[1, 3, 3], 1.0)).unwrap();
        let w = tape.leaf(&Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = x.conv2d(w, 1, 0, 1).unwrap();
        let out = tape.tensor(y);
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv2d_rejects_non_integral_output() {
        // 4x4 input, k=3, stride 2, no pad: (4-3)=1 not divisible by 2.
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 4, 4])).unwrap();
        let w = tape.leaf(&Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        assert!(x.conv2d(w, 2, 0, 1).is_err());
    }

    /// Naive six-nested-loop convolution used as the independence oracle.
    fn conv_oracle(
        x: &[f32],
        w: &[f32],
        cin: usize,
        h: usize,
        wd: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Vec<f32> {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let (cing, cog) = (cin / groups, cout / groups);
        let mut y = vec![0.0f32; cout * ho * wo];
        for oc in 0..cout {
            let g = oc / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for c in 0..cing {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((g * cing + c) * h + iy as usize) * wd + ix as usize]
                                    * w[((oc * cing + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    y[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv2d_matches_naive_oracle_exactly() {
        let mut rng = crate::rng::Rng::new(41);
        for &(cin, cout, h, w, k, stride, pad, groups) in &[
            (2usize, 3usize, 5usize, 6usize, 3usize, 1usize, 1usize, 1usize),
            (2, 2, 5, 5, 3, 2, 1, 1),
            (4, 4, 6, 6, 3, 1, 1, 4), // depthwise
            (4, 6, 5, 5, 1, 1, 0, 2),
        ] {
            let x = Tensor::from_fn(&[cin, h, w], |_| rng.next_f32() * 2.0 - 1.0);
            let wt = Tensor::from_fn(&[cout, cin / groups, k, k], |_| rng.next_f32() * 2.0 - 1.0);
            let tape = Tape::new();
            let xv = tape.leaf(&x).unwrap();
            let wv = tape.leaf(&wt).unwrap();
            let y = xv.conv2d(wv, stride, pad, groups).unwrap();
            let want = conv_oracle(x.data(), wt.data(), cin, h, w, cout, k, stride, pad, groups);
            assert_eq!(tape.tensor(y).data(), &want[..], "exact match vs naive loops");
        }
    }

    #[test]
    fn upsample2x_replicates_and_preserves_sum_x4() {
        let tape = Tape::new();
        let x = tape
            .leaf(&Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap())
            .unwrap();
        let y = x.upsample2x().unwrap();
        assert_eq!(tape.tensor(y).data(), &[1.0, 1.0, 1.0, 1.0]);

        let x = tape
            .leaf(&Tensor::from_vec(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap())
            .unwrap();
        let y = x.upsample2x().unwrap();
        let out = tape.tensor(y);
        assert_eq!(out.shape(), &[1, 4, 4]);
        assert_eq!(
            out.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let sx: f32 = 1. + 2. + 3. + 4.;
        let sy: f32 = out.data().iter().sum();
        assert_eq!(sy, 4.0 * sx);
    }

    #[test]
    fn layernorm_constant_vector_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[1, 4], 3.5)).unwrap();
        let s = tape.leaf(&Tensor::full(&[4], 1.0)).unwrap();
        let b = tape.leaf(&Tensor::zeros(&[4])).unwrap();
        let y = x.layernorm(s, b, 1e-6, 1).unwrap();
        for v in tape.tensor(y).data() {
            assert!(v.abs() < 1e-3);
        }
    }

    #[test]
    fn layernorm_unit_variance_pair() {
        let tape = Tape::new();
        let x = tape
            .leaf(&Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        let s = tape.leaf(&Tensor::full(&[2], 1.0)).unwrap();
        let b = tape.leaf(&Tensor::zeros(&[2])).unwrap();
        let y = x.layernorm(s, b, 1e-12, 1).unwrap();
        let out = tape.tensor(y);
        assert!((out.data()[0] - 1.0).abs() < 1e-4);
        assert!((out.data()[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layernorm_rejects_bad_eps() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 2])).unwrap();
        let s = tape.leaf(&Tensor::full(&[2], 1.0)).unwrap();
        let b = tape.leaf(&Tensor::zeros(&[2])).unwrap();
        assert!(x.layernorm(s, b, 0.0, 1).is_err());
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[1.0, 2.0])).unwrap();
        let loss = x.mul(x).unwrap().sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.dense(x), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_relu_sum() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[-1.0, 3.0])).unwrap();
        let loss = x.relu().unwrap().sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.dense(x), vec![0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[1.0, 2.0])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[1.0])).unwrap();
        let unused = tape.leaf(&t1(&[5.0, 6.0])).unwrap();
        let loss = x.sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.of(unused).is_none());
        assert_eq!(grads.dense(unused), vec![0.0, 0.0]);
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let tape = Tape::new();
        assert!(tape.leaf(&t1(&[f32::NAN])).is_err());
        assert!(tape.leaf(&t1(&[f32::INFINITY])).is_err());
    }

    #[test]
    fn ln_of_nonpositive_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(&t1(&[0.0])).unwrap();
        assert!(x.ln().is_err());
    }

    #[test]
    fn slice_concat_roundtrip() {
        let tape = Tape::new();
        let x = tape
            .leaf(&Tensor::from_vec(&[2, 4], vec![0., 1., 2., 3., 4., 5., 6., 7.]).unwrap())
            .unwrap();
        let a = x.slice2(1, 0, 2).unwrap();
        let b = x.slice2(1, 2, 4).unwrap();
        let back = tape.concat2(&[a, b], 1).unwrap();
        assert_eq!(tape.tensor(back).data(), tape.tensor(x).data());

        let loss = back.sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.dense(x), vec![1.0; 8]);
    }

    #[test]
    fn transpose_roundtrip_and_grad() {
        let tape = Tape::new();
        let x = tape
            .leaf(&Tensor::from_vec(&[2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap())
            .unwrap();
        let y = x.transpose2().unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        assert_eq!(tape.tensor(y).data(), &[0., 3., 1., 4., 2., 5.]);
        let z = y.transpose2().unwrap();
        assert_eq!(tape.tensor(z).data(), tape.tensor(x).data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape
            .leaf(&Tensor::from_vec(&[2, 3], vec![0.1, 2.0, -1.0, 5.0, 5.0, 5.0]).unwrap())
            .unwrap();
        let y = x.softmax_last().unwrap();
        let out = tape.tensor(y);
        for row in 0..2 {
            let s: f32 = out.data()[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // uniform row
        assert!((out.data()[3] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn fixed_inputs_give_bitwise_identical_results() {
        let run = || -> (Vec<f32>, Vec<f32>) {
            let mut rng = crate::rng::Rng::new(99);
            let x = Tensor::from_fn(&[3, 8, 8], |_| rng.next_f32() - 0.5);
            let w = Tensor::from_fn(&[4, 3, 3, 3], |_| rng.next_f32() - 0.5);
            let tape = Tape::new();
            let xv = tape.leaf(&x).unwrap();
            let wv = tape.leaf(&w).unwrap();
            let y = xv.conv2d(wv, 1, 1, 1).unwrap().relu().unwrap();
            let loss = y.mul(y).unwrap().mean_all().unwrap();
            let grads = tape.backward(loss).unwrap();
            (tape.tensor(y).data().to_vec(), grads.dense(wv))
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert_eq!(y1, y2);
        assert_eq!(g1, g2);
    }
}
