//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so insertion order is a valid
//! topological order and backward is a single reverse sweep. A graph is
//! single-threaded; parallel forward passes each build their own graph.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Gelu,
    Tanh,
    Sigmoid,
    Relu,
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Matmul(usize, usize),
    Act(usize, ActKind),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Tensor<T>,
        rstd: Tensor<T>,
    },
    SoftmaxLast(usize),
    LogSoftmaxLast(usize),
    Mha {
        qkv: usize,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Tensor<T>,
    },
    ExtractPatches {
        img: usize,
        channels: usize,
        side: usize,
        patch: usize,
    },
    PrependCls {
        tokens: usize,
        cls: usize,
        batch: usize,
    },
    AddPos {
        tokens: usize,
        pos: usize,
        batch: usize,
    },
    InterpPos {
        pos: usize,
        src_grid: usize,
        dst_grid: usize,
    },
    GatherCls {
        x: usize,
        tokens: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SumAll(usize),
    MeanRows(usize),
    Reshape(usize),
    L2NormRows {
        x: usize,
        norms: Tensor<T>,
    },
    WeightNormLinear {
        x: usize,
        v: usize,
        unit: Tensor<T>,
        norms: Tensor<T>,
    },
    CrossEntropySoft {
        logits: usize,
        target: Tensor<T>,
        tau: T,
        probs: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires: bool,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Rows of a tensor treated as a matrix over its last axis.
fn rows_of(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (if d == 0 { 0 } else { n / d }, d)
}

fn softmax_rows_inplace<T: Scalar>(data: &mut [T], rows: usize, cols: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>()
        && super::kernels::has_avx512()
    {
        let df = unsafe { &mut *(data as *mut [T] as *mut [f32]) };
        unsafe { super::kernels::softmax_rows_f32_avx512(df, rows, cols) };
        return;
    }
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let mut m = row[0];
        for &x in row.iter() {
            m = m.maximum(x);
        }
        let mut sum = T::ZERO;
        for x in row.iter_mut() {
            *x = (*x - m).exp_fast();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, op: Op<T>, value: Tensor<T>, requires: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            grad: None,
            requires,
        });
        Var(nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tensor value of a node (shares the underlying buffer).
    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Accumulated gradient of a node, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    /// Clears all gradient buffers (explicit reset between backward runs).
    pub fn reset_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Attention probabilities saved by an [`Graph::mha`] node.
    pub fn mha_probs(&self, v: Var) -> Option<Tensor<T>> {
        match &self.nodes.borrow()[v.0].op {
            Op::Mha { probs, .. } => Some(probs.clone()),
            _ => None,
        }
    }

    // ---- node constructors ----

    /// Differentiable leaf (parameter or input requiring gradients).
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += x;
        }
        Ok(self.push(Op::Add(a.0, b.0), out, self.requires(a) || self.requires(b)))
    }

    /// Broadcast-add a `[d]` (or `[1, d]`) row over the rows of `x`.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        let (rows, d) = rows_of(vx.shape());
        if vr.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: vx.shape().to_vec(),
                rhs: vr.shape().to_vec(),
            });
        }
        let mut out = vx.clone();
        {
            let o = out.data_mut();
            let r = vr.data();
            for i in 0..rows {
                for j in 0..d {
                    o[i * d + j] += r[j];
                }
            }
        }
        Ok(self.push(
            Op::AddRow(x.0, row.0),
            out,
            self.requires(x) || self.requires(row),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= x;
        }
        Ok(self.push(Op::Mul(a.0, b.0), out, self.requires(a) || self.requires(b)))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x.0, c), out, self.requires(x))
    }

    /// `[.., k] x [k, n]` matrix product; leading axes of `a` are flattened.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.shape().len() != 2 || va.shape().is_empty() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let k = vb.shape()[0];
        let n = vb.shape()[1];
        let (m, ka) = rows_of(va.shape());
        if ka != k {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&shape);
        gemm_nn(va.data(), vb.data(), out.data_mut(), m, k, n);
        Ok(self.push(
            Op::Matmul(a.0, b.0),
            out,
            self.requires(a) || self.requires(b),
        ))
    }

    /// Fused linear layer: `x @ w + bias`.
    pub fn linear(&self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, bias)
    }

    pub fn activation(&self, x: Var, kind: ActKind) -> Var {
        let vx = self.value(x);
        let out = match kind {
            ActKind::Gelu => gelu_tensor(&vx),
            ActKind::Tanh => vx.map(|v| v.tanh()),
            ActKind::Sigmoid => vx.map(sigmoid),
            ActKind::Relu => vx.map(|v| v.maximum(T::ZERO)),
        };
        self.push(Op::Act(x.0, kind), out, self.requires(x))
    }

    /// Per-row normalization over the last axis, then affine transform.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let (rows, d) = rows_of(vx.shape());
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.numel() != d || vb.numel() != d || d == 0 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let mut mean = Tensor::zeros(&[rows]);
        let mut rstd = Tensor::zeros(&[rows]);
        let mut out = Tensor::zeros(vx.shape());
        {
            let xd = vx.data();
            let md = mean.data_mut();
            let inv_d = T::ONE / T::from_f64(d as f64);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mut s = T::ZERO;
                for &v in row {
                    s += v;
                }
                md[r] = s * inv_d;
            }
            let rd = rstd.data_mut();
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mut s = T::ZERO;
                for &v in row {
                    let c = v - md[r];
                    s += c * c;
                }
                rd[r] = T::ONE / (s * inv_d + eps).sqrt();
            }
            let od = out.data_mut();
            let (gd, bd) = (vg.data(), vb.data());
            for r in 0..rows {
                for j in 0..d {
                    od[r * d + j] = (xd[r * d + j] - md[r]) * rd[r] * gd[j] + bd[j];
                }
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                rstd,
            },
            out,
            req,
        ))
    }

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (rows, d) = rows_of(vx.shape());
        let mut out = vx.clone();
        softmax_rows_inplace(out.data_mut(), rows, d);
        self.push(Op::SoftmaxLast(x.0), out, self.requires(x))
    }

    /// log(softmax(x)) over the last axis, computed stably.
    pub fn log_softmax_last(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (rows, d) = rows_of(vx.shape());
        let mut out = vx.clone();
        {
            let od = out.data_mut();
            for r in 0..rows {
                let row = &mut od[r * d..(r + 1) * d];
                let mut m = row[0];
                for &v in row.iter() {
                    m = m.maximum(v);
                }
                let mut sum = T::ZERO;
                for &v in row.iter() {
                    sum += (v - m).exp_fast();
                }
                let lse = m + sum.ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
        }
        self.push(Op::LogSoftmaxLast(x.0), out, self.requires(x))
    }

    /// Multi-head self-attention over a packed `[B*T, 3d]` qkv matrix.
    /// Returns `[B*T, d]`.
    pub fn mha(&self, qkv: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let v = self.value(qkv);
        let (rows, three_d) = rows_of(v.shape());
        if rows != batch * tokens || three_d % 3 != 0 {
            return Err(Error::ShapeMismatch {
                op: "mha",
                lhs: v.shape().to_vec(),
                rhs: vec![batch * tokens, three_d],
            });
        }
        let d = three_d / 3;
        if d % heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "mha: dim {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let mut out = Tensor::zeros(&[rows, d]);
        let mut probs = Tensor::zeros(&[batch, heads, tokens, tokens]);
        {
            let src = v.data();
            let od = out.data_mut();
            let pd = probs.data_mut();
            let mut q = vec![T::ZERO; tokens * dh];
            let mut kbuf = vec![T::ZERO; tokens * dh];
            let mut vbuf = vec![T::ZERO; tokens * dh];
            let mut o = vec![T::ZERO; tokens * dh];
            for b in 0..batch {
                for h in 0..heads {
                    gather(src, b * tokens, tokens, h * dh, dh, three_d, &mut q);
                    gather(src, b * tokens, tokens, d + h * dh, dh, three_d, &mut kbuf);
                    gather(src, b * tokens, tokens, 2 * d + h * dh, dh, three_d, &mut vbuf);
                    let p = &mut pd[(b * heads + h) * tokens * tokens..][..tokens * tokens];
                    p.iter_mut().for_each(|x| *x = T::ZERO);
                    gemm_nt(&q, &kbuf, p, tokens, dh, tokens);
                    p.iter_mut().for_each(|x| *x *= scale);
                    softmax_rows_inplace(p, tokens, tokens);
                    o.iter_mut().for_each(|x| *x = T::ZERO);
                    gemm_nn(p, &vbuf, &mut o, tokens, tokens, dh);
                    scatter(&o, b * tokens, tokens, h * dh, dh, d, od);
                }
            }
        }
        Ok(self.push(
            Op::Mha {
                qkv: qkv.0,
                batch,
                tokens,
                heads,
                probs,
            },
            out,
            self.requires(qkv),
        ))
    }

    /// `[B, C, S, S]` image batch to `[B*T, C*p*p]` flattened non-overlapping
    /// patches, row-major over the patch grid.
    pub fn extract_patches(&self, img: Var, patch: usize) -> Result<Var> {
        let v = self.value(img);
        let sh = v.shape().to_vec();
        if sh.len() != 4 || sh[2] != sh[3] || sh[2] % patch != 0 {
            return Err(Error::ShapeMismatch {
                op: "extract_patches",
                lhs: sh,
                rhs: vec![patch],
            });
        }
        let (b, c, s) = (sh[0], sh[1], sh[2]);
        let g = s / patch;
        let t = g * g;
        let cols = c * patch * patch;
        let mut out = Tensor::zeros(&[b * t, cols]);
        {
            let src = v.data();
            let od = out.data_mut();
            for bi in 0..b {
                for ty in 0..g {
                    for tx in 0..g {
                        let row = (bi * t + ty * g + tx) * cols;
                        for ci in 0..c {
                            for dy in 0..patch {
                                let src_off = ((bi * c + ci) * s + ty * patch + dy) * s + tx * patch;
                                let dst_off = row + (ci * patch + dy) * patch;
                                od[dst_off..dst_off + patch]
                                    .copy_from_slice(&src[src_off..src_off + patch]);
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::ExtractPatches {
                img: img.0,
                channels: c,
                side: s,
                patch,
            },
            out,
            self.requires(img),
        ))
    }

    /// Prepends a learned class token row to each image's token block:
    /// `[B*Tp, d]` + `[1, d]` -> `[B*(Tp+1), d]`.
    pub fn prepend_cls(&self, tokens: Var, cls: Var, batch: usize) -> Result<Var> {
        let vt = self.value(tokens);
        let vc = self.value(cls);
        let (rows, d) = rows_of(vt.shape());
        if vc.numel() != d || rows % batch != 0 {
            return Err(Error::ShapeMismatch {
                op: "prepend_cls",
                lhs: vt.shape().to_vec(),
                rhs: vc.shape().to_vec(),
            });
        }
        let tp = rows / batch;
        let t = tp + 1;
        let mut out = Tensor::zeros(&[batch * t, d]);
        {
            let od = out.data_mut();
            let td = vt.data();
            let cd = vc.data();
            for b in 0..batch {
                od[b * t * d..b * t * d + d].copy_from_slice(cd);
                od[(b * t + 1) * d..(b * t + t) * d]
                    .copy_from_slice(&td[b * tp * d..(b + 1) * tp * d]);
            }
        }
        Ok(self.push(
            Op::PrependCls {
                tokens: tokens.0,
                cls: cls.0,
                batch,
            },
            out,
            self.requires(tokens) || self.requires(cls),
        ))
    }

    /// Adds a `[T, d]` positional table to each image block of `[B*T, d]`.
    pub fn add_pos(&self, tokens: Var, pos: Var, batch: usize) -> Result<Var> {
        let vt = self.value(tokens);
        let vp = self.value(pos);
        let (rows, d) = rows_of(vt.shape());
        let (t, dp) = rows_of(vp.shape());
        if dp != d || rows != batch * t {
            return Err(Error::ShapeMismatch {
                op: "add_pos",
                lhs: vt.shape().to_vec(),
                rhs: vp.shape().to_vec(),
            });
        }
        let mut out = vt.clone();
        {
            let od = out.data_mut();
            let pd = vp.data();
            for b in 0..batch {
                for i in 0..t * d {
                    od[b * t * d + i] += pd[i];
                }
            }
        }
        Ok(self.push(
            Op::AddPos {
                tokens: tokens.0,
                pos: pos.0,
                batch,
            },
            out,
            self.requires(tokens) || self.requires(pos),
        ))
    }

    /// Bilinearly resamples a positional table `[1+G*G, d]` to `[1+g*g, d]`;
    /// the class-token entry is copied verbatim.
    pub fn interp_pos(&self, pos: Var, src_grid: usize, dst_grid: usize) -> Result<Var> {
        let vp = self.value(pos);
        let (rows, d) = rows_of(vp.shape());
        if rows != 1 + src_grid * src_grid || src_grid == 0 || dst_grid == 0 {
            return Err(Error::ShapeMismatch {
                op: "interp_pos",
                lhs: vp.shape().to_vec(),
                rhs: vec![1 + src_grid * src_grid, d],
            });
        }
        let mut out = Tensor::zeros(&[1 + dst_grid * dst_grid, d]);
        {
            let od = out.data_mut();
            let pd = vp.data();
            od[..d].copy_from_slice(&pd[..d]);
            for (cell, w) in bilinear_cells(src_grid, dst_grid) {
                let dst = (1 + cell.0) * d;
                let src = (1 + cell.1) * d;
                let wt = T::from_f64(w);
                for j in 0..d {
                    od[dst + j] += wt * pd[src + j];
                }
            }
        }
        Ok(self.push(
            Op::InterpPos {
                pos: pos.0,
                src_grid,
                dst_grid,
            },
            out,
            self.requires(pos),
        ))
    }

    /// Picks the class-token row of each image: `[B*T, d]` -> `[B, d]`.
    pub fn gather_cls(&self, x: Var, tokens: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, d) = rows_of(vx.shape());
        if tokens == 0 || rows % tokens != 0 {
            return Err(Error::ShapeMismatch {
                op: "gather_cls",
                lhs: vx.shape().to_vec(),
                rhs: vec![tokens],
            });
        }
        let b = rows / tokens;
        let mut out = Tensor::zeros(&[b, d]);
        {
            let od = out.data_mut();
            let xd = vx.data();
            for bi in 0..b {
                od[bi * d..(bi + 1) * d].copy_from_slice(&xd[bi * tokens * d..bi * tokens * d + d]);
            }
        }
        Ok(self.push(
            Op::GatherCls {
                x: x.0,
                tokens,
            },
            out,
            self.requires(x),
        ))
    }

    /// Contiguous row slice `[start, start+len)` of a `[N, d]` matrix.
    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, d) = rows_of(vx.shape());
        if start + len > rows {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: vx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = Tensor::new(&[len, d], vx.data()[start * d..(start + len) * d].to_vec())?;
        Ok(self.push(Op::SliceRows { x: x.0, start }, out, self.requires(x)))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let mut s = T::ZERO;
        for &v in vx.data() {
            s += v;
        }
        self.push(Op::SumAll(x.0), Tensor::scalar(s), self.requires(x))
    }

    /// Column means of a `[N, d]` matrix -> `[1, d]`.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, d) = rows_of(vx.shape());
        if rows == 0 {
            return Err(Error::Contract("mean_rows over empty matrix".into()));
        }
        let mut out = Tensor::zeros(&[1, d]);
        {
            let od = out.data_mut();
            let xd = vx.data();
            for r in 0..rows {
                for j in 0..d {
                    od[j] += xd[r * d + j];
                }
            }
            let inv = T::ONE / T::from_f64(rows as f64);
            for v in od.iter_mut() {
                *v *= inv;
            }
        }
        Ok(self.push(Op::MeanRows(x.0), out, self.requires(x)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape(x.0), out, self.requires(x)))
    }

    /// Normalizes each row to unit L2 norm.
    pub fn l2_normalize_rows(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (rows, d) = rows_of(vx.shape());
        let mut norms = Tensor::zeros(&[rows]);
        let mut out = vx.clone();
        {
            let nd = norms.data_mut();
            let od = out.data_mut();
            let floor = T::from_f64(1e-12);
            for r in 0..rows {
                let row = &mut od[r * d..(r + 1) * d];
                let mut s = T::ZERO;
                for &v in row.iter() {
                    s += v * v;
                }
                let n = s.sqrt().maximum(floor);
                nd[r] = n;
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
        }
        self.push(Op::L2NormRows { x: x.0, norms }, out, self.requires(x))
    }

    /// Linear layer whose weight rows are L2-normalized directions with unit
    /// gain: `y = x @ normalize_rows(v)^T`.
    pub fn weight_norm_linear(&self, x: Var, v: Var) -> Result<Var> {
        let vx = self.value(x);
        let vv = self.value(v);
        let (n, b) = rows_of(vx.shape());
        if vv.shape().len() != 2 || vv.shape()[1] != b {
            return Err(Error::ShapeMismatch {
                op: "weight_norm_linear",
                lhs: vx.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let k = vv.shape()[0];
        let mut unit = vv.clone();
        let mut norms = Tensor::zeros(&[k]);
        {
            let ud = unit.data_mut();
            let nd = norms.data_mut();
            let floor = T::from_f64(1e-12);
            for r in 0..k {
                let row = &mut ud[r * b..(r + 1) * b];
                let mut s = T::ZERO;
                for &w in row.iter() {
                    s += w * w;
                }
                let nrm = s.sqrt().maximum(floor);
                nd[r] = nrm;
                for w in row.iter_mut() {
                    *w /= nrm;
                }
            }
        }
        let mut out = Tensor::zeros(&[n, k]);
        gemm_nt(vx.data(), unit.data(), out.data_mut(), n, b, k);
        Ok(self.push(
            Op::WeightNormLinear {
                x: x.0,
                v: v.0,
                unit,
                norms,
            },
            out,
            self.requires(x) || self.requires(v),
        ))
    }

    /// Mean over rows of the soft cross-entropy
    /// `-sum_k target[k] * log_softmax(logits/tau)[k]`. `target` rows are
    /// fixed distributions (no gradient flows into them).
    pub fn cross_entropy_soft(&self, logits: Var, target: &Tensor<T>, tau: T) -> Result<Var> {
        if tau <= T::ZERO {
            return Err(Error::InvalidParameter(format!(
                "cross_entropy_soft: tau must be positive, got {tau}"
            )));
        }
        let vl = self.value(logits);
        if vl.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_soft",
                lhs: vl.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let (rows, d) = rows_of(vl.shape());
        let mut probs = Tensor::zeros(&[rows, d]);
        let mut loss = T::ZERO;
        {
            let pd = probs.data_mut();
            let ld = vl.data();
            let td = target.data();
            for r in 0..rows {
                let row = &ld[r * d..(r + 1) * d];
                let mut m = row[0] / tau;
                for &v in row {
                    m = m.maximum(v / tau);
                }
                let mut sum = T::ZERO;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v / tau - m).exp_fast();
                    pd[r * d + j] = e;
                    sum += e;
                }
                let lse = m + sum.ln();
                for j in 0..d {
                    pd[r * d + j] /= sum;
                    loss -= td[r * d + j] * (row[j] / tau - lse);
                }
            }
        }
        loss /= T::from_f64(rows as f64);
        Ok(self.push(
            Op::CrossEntropySoft {
                logits: logits.0,
                target: target.clone(),
                tau,
                probs,
            },
            Tensor::scalar(loss),
            self.requires(logits),
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Gradients accumulate across calls
    /// until [`Graph::reset_grads`].
    pub fn backward(&self, root: Var) -> Result<()> {
        {
            let mut nodes = self.nodes.borrow_mut();
            let rn = &mut nodes[root.0];
            if rn.value.numel() != 1 {
                return Err(Error::Contract(format!(
                    "backward root must be scalar, got shape {:?}",
                    rn.value.shape()
                )));
            }
            add_into(&mut rn.grad, rn.value.shape(), |g| g[0] += T::ONE);
        }
        let len = self.nodes.borrow().len();
        let mut nodes = self.nodes.borrow_mut();
        for id in (0..len.min(root.0 + 1)).rev() {
            if nodes[id].grad.is_none() || matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let (head, tail) = nodes.split_at_mut(id);
            let node = &mut tail[0];
            // Interior gradients are consumed exactly once per backward pass.
            let g = node.grad.take().unwrap();
            let gd = g.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    for &p in [a, b].iter() {
                        if head[*p].requires {
                            let shape = head[*p].value.shape().to_vec();
                            add_into(&mut head[*p].grad, &shape, |dst| {
                                for (d, &s) in dst.iter_mut().zip(gd) {
                                    *d += s;
                                }
                            });
                        }
                    }
                }
                Op::AddRow(x, row) => {
                    let d = head[*row].value.numel();
                    let rows = gd.len() / d;
                    if head[*x].requires {
                        let shape = head[*x].value.shape().to_vec();
                        add_into(&mut head[*x].grad, &shape, |dst| {
                            for (dv, &s) in dst.iter_mut().zip(gd) {
                                *dv += s;
                            }
                        });
                    }
                    if head[*row].requires {
                        let shape = head[*row].value.shape().to_vec();
                        add_into(&mut head[*row].grad, &shape, |dst| {
                            for r in 0..rows {
                                for j in 0..d {
                                    dst[j] += gd[r * d + j];
                                }
                            }
                        });
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if head[a].requires {
                        let other = head[b].value.clone();
                        let shape = head[a].value.shape().to_vec();
                        add_into(&mut head[a].grad, &shape, |dst| {
                            for ((d, &s), &o) in dst.iter_mut().zip(gd).zip(other.data()) {
                                *d += s * o;
                            }
                        });
                    }
                    if head[b].requires {
                        let other = head[a].value.clone();
                        let shape = head[b].value.shape().to_vec();
                        add_into(&mut head[b].grad, &shape, |dst| {
                            for ((d, &s), &o) in dst.iter_mut().zip(gd).zip(other.data()) {
                                *d += s * o;
                            }
                        });
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    if head[*x].requires {
                        let shape = head[*x].value.shape().to_vec();
                        add_into(&mut head[*x].grad, &shape, |dst| {
                            for (d, &s) in dst.iter_mut().zip(gd) {
                                *d += s * c;
                            }
                        });
                    }
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let k = head[b].value.shape()[0];
                    let n = head[b].value.shape()[1];
                    let m = gd.len() / n;
                    if head[a].requires {
                        let bv = head[b].value.clone();
                        let shape = head[a].value.shape().to_vec();
                        add_into(&mut head[a].grad, &shape, |dst| {
                            gemm_nt(gd, bv.data(), dst, m, n, k);
                        });
                    }
                    if head[b].requires {
                        let av = head[a].value.clone();
                        let shape = head[b].value.shape().to_vec();
                        add_into(&mut head[b].grad, &shape, |dst| {
                            gemm_tn(av.data(), gd, dst, m, k, n);
                        });
                    }
                }
                Op::Act(x, kind) => {
                    let kind = *kind;
                    let x = *x;
                    if head[x].requires {
                        let xv = head[x].value.clone();
                        let yv = node.value.clone();
                        let shape = xv.shape().to_vec();
                        add_into(&mut head[x].grad, &shape, |dst| {
                            act_backward(kind, xv.data(), yv.data(), gd, dst);
                        });
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let d = head[gamma].value.numel();
                    let rows = gd.len() / d;
                    let xv = head[x].value.clone();
                    let gv = head[gamma].value.clone();
                    let (md, rd) = (mean.clone(), rstd.clone());
                    if head[beta].requires {
                        let shape = head[beta].value.shape().to_vec();
                        add_into(&mut head[beta].grad, &shape, |dst| {
                            for r in 0..rows {
                                for j in 0..d {
                                    dst[j] += gd[r * d + j];
                                }
                            }
                        });
                    }
                    if head[gamma].requires {
                        let shape = head[gamma].value.shape().to_vec();
                        let xd = xv.data();
                        add_into(&mut head[gamma].grad, &shape, |dst| {
                            for r in 0..rows {
                                for j in 0..d {
                                    let xh = (xd[r * d + j] - md.data()[r]) * rd.data()[r];
                                    dst[j] += gd[r * d + j] * xh;
                                }
                            }
                        });
                    }
                    if head[x].requires {
                        let shape = xv.shape().to_vec();
                        let xd = xv.data();
                        let inv_d = T::ONE / T::from_f64(d as f64);
                        add_into(&mut head[x].grad, &shape, |dst| {
                            for r in 0..rows {
                                let mut s1 = T::ZERO;
                                let mut s2 = T::ZERO;
                                for j in 0..d {
                                    let gy = gd[r * d + j] * gv.data()[j];
                                    let xh = (xd[r * d + j] - md.data()[r]) * rd.data()[r];
                                    s1 += gy;
                                    s2 += gy * xh;
                                }
                                s1 *= inv_d;
                                s2 *= inv_d;
                                for j in 0..d {
                                    let gy = gd[r * d + j] * gv.data()[j];
                                    let xh = (xd[r * d + j] - md.data()[r]) * rd.data()[r];
                                    dst[r * d + j] += rd.data()[r] * (gy - s1 - xh * s2);
                                }
                            }
                        });
                    }
                }
                Op::SoftmaxLast(x) => {
                    let x = *x;
                    if head[x].requires {
                        let yv = node.value.clone();
                        let (rows, d) = rows_of(yv.shape());
                        let shape = yv.shape().to_vec();
                        add_into(&mut head[x].grad, &shape, |dst| {
                            let yd = yv.data();
                            for r in 0..rows {
                                let mut dot = T::ZERO;
                                for j in 0..d {
                                    dot += gd[r * d + j] * yd[r * d + j];
                                }
                                for j in 0..d {
                                    dst[r * d + j] += yd[r * d + j] * (gd[r * d + j] - dot);
                                }
                            }
                        });
                    }
                }
                Op::LogSoftmaxLast(x) => {
                    let x = *x;
                    if head[x].requires {
                        let yv = node.value.clone();
                        let (rows, d) = rows_of(yv.shape());
                        let shape = yv.shape().to_vec();
                        add_into(&mut head[x].grad, &shape, |dst| {
                            let yd = yv.data();
                            for r in 0..rows {
                                let mut gsum = T::ZERO;
                                for j in 0..d {
                                    gsum += gd[r * d + j];
                                }
                                for j in 0..d {
                                    dst[r * d + j] += gd[r * d + j] - yd[r * d + j].exp_fast() * gsum;
                                }
                            }
                        });
                    }
                }
                Op::Mha {
                    qkv,
                    batch,
                    tokens,
                    heads,
                    probs,
                } => {
                    let (qkv, batch, tokens, heads) = (*qkv, *batch, *tokens, *heads);
                    if head[qkv].requires {
                        let src = head[qkv].value.clone();
                        let three_d = src.shape().last().copied().unwrap();
                        let d = three_d / 3;
                        let dh = d / heads;
                        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                        let probs = probs.clone();
                        let shape = src.shape().to_vec();
                        add_into(&mut head[qkv].grad, &shape, |dst| {
                            mha_backward(
                                src.data(),
                                probs.data(),
                                gd,
                                dst,
                                batch,
                                tokens,
                                heads,
                                dh,
                                scale,
                            );
                        });
                    }
                }
                Op::ExtractPatches {
                    img,
                    channels,
                    side,
                    patch,
                } => {
                    let (img, c, s, p) = (*img, *channels, *side, *patch);
                    if head[img].requires {
                        let g_grid = s / p;
                        let t = g_grid * g_grid;
                        let cols = c * p * p;
                        let b = gd.len() / (t * cols);
                        let shape = head[img].value.shape().to_vec();
                        add_into(&mut head[img].grad, &shape, |dst| {
                            for bi in 0..b {
                                for ty in 0..g_grid {
                                    for tx in 0..g_grid {
                                        let row = (bi * t + ty * g_grid + tx) * cols;
                                        for ci in 0..c {
                                            for dy in 0..p {
                                                let doff =
                                                    ((bi * c + ci) * s + ty * p + dy) * s + tx * p;
                                                let soff = row + (ci * p + dy) * p;
                                                for dx in 0..p {
                                                    dst[doff + dx] += gd[soff + dx];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        });
                    }
                }
                Op::PrependCls { tokens, cls, batch } => {
                    let (tokens_id, cls_id, b) = (*tokens, *cls, *batch);
                    let d = head[cls_id].value.numel();
                    let t = gd.len() / (b * d);
                    let tp = t - 1;
                    if head[cls_id].requires {
                        let shape = head[cls_id].value.shape().to_vec();
                        add_into(&mut head[cls_id].grad, &shape, |dst| {
                            for bi in 0..b {
                                for j in 0..d {
                                    dst[j] += gd[bi * t * d + j];
                                }
                            }
                        });
                    }
                    if head[tokens_id].requires {
                        let shape = head[tokens_id].value.shape().to_vec();
                        add_into(&mut head[tokens_id].grad, &shape, |dst| {
                            for bi in 0..b {
                                for i in 0..tp * d {
                                    dst[bi * tp * d + i] += gd[(bi * t + 1) * d + i];
                                }
                            }
                        });
                    }
                }
                Op::AddPos { tokens, pos, batch } => {
                    let (tokens_id, pos_id, b) = (*tokens, *pos, *batch);
                    let td = head[pos_id].value.numel();
                    if head[tokens_id].requires {
                        let shape = head[tokens_id].value.shape().to_vec();
                        add_into(&mut head[tokens_id].grad, &shape, |dst| {
                            for (d, &s) in dst.iter_mut().zip(gd) {
                                *d += s;
                            }
                        });
                    }
                    if head[pos_id].requires {
                        let shape = head[pos_id].value.shape().to_vec();
                        add_into(&mut head[pos_id].grad, &shape, |dst| {
                            for bi in 0..b {
                                for i in 0..td {
                                    dst[i] += gd[bi * td + i];
                                }
                            }
                        });
                    }
                }
                Op::InterpPos {
                    pos,
                    src_grid,
                    dst_grid,
                } => {
                    let (pos_id, sg, dg) = (*pos, *src_grid, *dst_grid);
                    if head[pos_id].requires {
                        let d = head[pos_id].value.shape().last().copied().unwrap();
                        let shape = head[pos_id].value.shape().to_vec();
                        add_into(&mut head[pos_id].grad, &shape, |dst| {
                            for j in 0..d {
                                dst[j] += gd[j];
                            }
                            for (cell, w) in bilinear_cells(sg, dg) {
                                let from = (1 + cell.0) * d;
                                let to = (1 + cell.1) * d;
                                let wt = T::from_f64(w);
                                for j in 0..d {
                                    dst[to + j] += wt * gd[from + j];
                                }
                            }
                        });
                    }
                }
                Op::GatherCls { x, tokens } => {
                    let (x, t) = (*x, *tokens);
                    if head[x].requires {
                        let d = head[x].value.shape().last().copied().unwrap();
                        let b = gd.len() / d;
                        let shape = head[x].value.shape().to_vec();
                        add_into(&mut head[x].grad, &shape, |dst| {
                            for bi in 0..b {
                                for j in 0..d {
                                    dst[bi * t * d + j] += gd[bi * d + j];
                                }
                            }
                        });
                    }
                }
                Op::SliceRows { x, start } => {
                    let (x, start) = (*x, *start);
                    if head[x].requires {
                        let d = head[x].value.shape().last().copied().unwrap();
                        let shape = head[x].value.shape().to_vec();
                        add_into(&mut head[x].grad, &shape, |dst| {
                            for (i, &s) in gd.iter().enumerate() {
                                dst[start * d + i] += s;
                            }
                        });
                    }
                }
                Op::SumAll(x) => {
                    let x = *x;
                    if head[x].requires {
                        let s = gd[0];
                        let shape = head[x].value.shape().to_vec();
                        add_into(&mut head[x].grad, &shape, |dst| {
                            for d in dst.iter_mut() {
                                *d += s;
                            }
                        });
                    }
                }
                Op::MeanRows(x) => {
                    let x = *x;
                    if head[x].requires {
                        let shape = head[x].value.shape().to_vec();
                        let (rows, d) = rows_of(&shape);
                        let inv = T::ONE / T::from_f64(rows as f64);
                        add_into(&mut head[x].grad, &shape, |dst| {
                            for r in 0..rows {
                                for j in 0..d {
                                    dst[r * d + j] += gd[j] * inv;
                                }
                            }
                        });
                    }
                }
                Op::Reshape(x) => {
                    let x = *x;
                    if head[x].requires {
                        let shape = head[x].value.shape().to_vec();
                        add_into(&mut head[x].grad, &shape, |dst| {
                            for (d, &s) in dst.iter_mut().zip(gd) {
                                *d += s;
                            }
                        });
                    }
                }
                Op::L2NormRows { x, norms } => {
                    let x = *x;
                    if head[x].requires {
                        let yv = node.value.clone();
                        let norms = norms.clone();
                        let (rows, d) = rows_of(yv.shape());
                        let shape = head[x].value.shape().to_vec();
                        add_into(&mut head[x].grad, &shape, |dst| {
                            let yd = yv.data();
                            for r in 0..rows {
                                let mut dot = T::ZERO;
                                for j in 0..d {
                                    dot += gd[r * d + j] * yd[r * d + j];
                                }
                                let inv_n = T::ONE / norms.data()[r];
                                for j in 0..d {
                                    dst[r * d + j] +=
                                        (gd[r * d + j] - yd[r * d + j] * dot) * inv_n;
                                }
                            }
                        });
                    }
                }
                Op::WeightNormLinear { x, v, unit, norms } => {
                    let (x, v) = (*x, *v);
                    let unit = unit.clone();
                    let norms = norms.clone();
                    let k = unit.shape()[0];
                    let b = unit.shape()[1];
                    let n = gd.len() / k;
                    if head[x].requires {
                        let shape = head[x].value.shape().to_vec();
                        add_into(&mut head[x].grad, &shape, |dst| {
                            gemm_nn(gd, unit.data(), dst, n, k, b);
                        });
                    }
                    if head[v].requires {
                        let xv = head[x].value.clone();
                        let shape = head[v].value.shape().to_vec();
                        add_into(&mut head[v].grad, &shape, |dst| {
                            // G = g^T x, then project out the radial component.
                            let mut gproj = vec![T::ZERO; k * b];
                            gemm_tn(gd, xv.data(), &mut gproj, n, k, b);
                            let ud = unit.data();
                            for r in 0..k {
                                let mut dot = T::ZERO;
                                for j in 0..b {
                                    dot += gproj[r * b + j] * ud[r * b + j];
                                }
                                let inv_n = T::ONE / norms.data()[r];
                                for j in 0..b {
                                    dst[r * b + j] +=
                                        (gproj[r * b + j] - dot * ud[r * b + j]) * inv_n;
                                }
                            }
                        });
                    }
                }
                Op::CrossEntropySoft {
                    logits,
                    target,
                    tau,
                    probs,
                } => {
                    let logits = *logits;
                    if head[logits].requires {
                        let tau = *tau;
                        let probs = probs.clone();
                        let target = target.clone();
                        let (rows, d) = rows_of(probs.shape());
                        let coef = gd[0] / (tau * T::from_f64(rows as f64));
                        let shape = head[logits].value.shape().to_vec();
                        add_into(&mut head[logits].grad, &shape, |dst| {
                            let pd = probs.data();
                            let td = target.data();
                            for i in 0..rows * d {
                                dst[i] += coef * (pd[i] - td[i]);
                            }
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(
    slot: &mut Option<Tensor<T>>,
    shape: &[usize],
    f: impl FnOnce(&mut [T]),
) {
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    f(slot.as_mut().unwrap().data_mut());
}

fn gelu_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    #[cfg(target_arch = "x86_64")]
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>()
        && super::kernels::has_avx512()
    {
        let mut out = Tensor::zeros(x.shape());
        let xf = unsafe { &*(x.data() as *const [T] as *const [f32]) };
        let of = unsafe { &mut *(out.data_mut() as *mut [T] as *mut [f32]) };
        unsafe { super::kernels::gelu_f32_avx512(xf, of) };
        return out;
    }
    x.map(gelu)
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let inner = c * (x + a * x * x * x);
    T::from_f64(0.5) * x * (T::ONE + inner.tanh_fast())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn act_backward<T: Scalar>(kind: ActKind, x: &[T], y: &[T], g: &[T], dst: &mut [T]) {
    match kind {
        ActKind::Gelu => {
            #[cfg(target_arch = "x86_64")]
            if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>()
                && super::kernels::has_avx512()
            {
                let xf = unsafe { &*(x as *const [T] as *const [f32]) };
                let gf = unsafe { &*(g as *const [T] as *const [f32]) };
                let df = unsafe { &mut *(dst as *mut [T] as *mut [f32]) };
                unsafe { super::kernels::gelu_bwd_f32_avx512(xf, gf, df) };
                return;
            }
            let c = T::from_f64(0.797_884_560_802_865_4);
            let a = T::from_f64(0.044715);
            let half = T::from_f64(0.5);
            let three = T::from_f64(3.0);
            for i in 0..x.len() {
                let xi = x[i];
                let inner = c * (xi + a * xi * xi * xi);
                let t = inner.tanh_fast();
                let dinner = c * (T::ONE + three * a * xi * xi);
                let dy = half * (T::ONE + t) + half * xi * (T::ONE - t * t) * dinner;
                dst[i] += g[i] * dy;
            }
        }
        ActKind::Tanh => {
            for i in 0..y.len() {
                dst[i] += g[i] * (T::ONE - y[i] * y[i]);
            }
        }
        ActKind::Sigmoid => {
            for i in 0..y.len() {
                dst[i] += g[i] * y[i] * (T::ONE - y[i]);
            }
        }
        ActKind::Relu => {
            for i in 0..x.len() {
                if x[i] > T::ZERO {
                    dst[i] += g[i];
                }
            }
        }
    }
}

fn gather<T: Scalar>(
    src: &[T],
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
    stride: usize,
    dst: &mut [T],
) {
    for r in 0..rows {
        let off = (row0 + r) * stride + col0;
        dst[r * cols..(r + 1) * cols].copy_from_slice(&src[off..off + cols]);
    }
}

fn scatter<T: Scalar>(
    src: &[T],
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
    stride: usize,
    dst: &mut [T],
) {
    for r in 0..rows {
        let off = (row0 + r) * stride + col0;
        dst[off..off + cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
    }
}

fn scatter_add<T: Scalar>(
    src: &[T],
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
    stride: usize,
    dst: &mut [T],
) {
    for r in 0..rows {
        let off = (row0 + r) * stride + col0;
        for c in 0..cols {
            dst[off + c] += src[r * cols + c];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn mha_backward<T: Scalar>(
    src: &[T],
    probs: &[T],
    g: &[T],
    dst: &mut [T],
    batch: usize,
    tokens: usize,
    heads: usize,
    dh: usize,
    scale: T,
) {
    let d = heads * dh;
    let three_d = 3 * d;
    let tt = tokens * tokens;
    let mut q = vec![T::ZERO; tokens * dh];
    let mut kbuf = vec![T::ZERO; tokens * dh];
    let mut vbuf = vec![T::ZERO; tokens * dh];
    let mut dout = vec![T::ZERO; tokens * dh];
    let mut dv = vec![T::ZERO; tokens * dh];
    let mut dp = vec![T::ZERO; tt];
    let mut ds = vec![T::ZERO; tt];
    let mut dq = vec![T::ZERO; tokens * dh];
    let mut dk = vec![T::ZERO; tokens * dh];
    for b in 0..batch {
        for h in 0..heads {
            gather(src, b * tokens, tokens, h * dh, dh, three_d, &mut q);
            gather(src, b * tokens, tokens, d + h * dh, dh, three_d, &mut kbuf);
            gather(src, b * tokens, tokens, 2 * d + h * dh, dh, three_d, &mut vbuf);
            gather(g, b * tokens, tokens, h * dh, dh, d, &mut dout);
            let p = &probs[(b * heads + h) * tt..][..tt];

            dv.iter_mut().for_each(|x| *x = T::ZERO);
            gemm_tn(p, &dout, &mut dv, tokens, tokens, dh);

            dp.iter_mut().for_each(|x| *x = T::ZERO);
            gemm_nt(&dout, &vbuf, &mut dp, tokens, dh, tokens);

            // softmax backward, then undo the pre-softmax scaling
            for r in 0..tokens {
                let mut dot = T::ZERO;
                for c in 0..tokens {
                    dot += dp[r * tokens + c] * p[r * tokens + c];
                }
                for c in 0..tokens {
                    ds[r * tokens + c] =
                        p[r * tokens + c] * (dp[r * tokens + c] - dot) * scale;
                }
            }

            dq.iter_mut().for_each(|x| *x = T::ZERO);
            gemm_nn(&ds, &kbuf, &mut dq, tokens, tokens, dh);
            dk.iter_mut().for_each(|x| *x = T::ZERO);
            gemm_tn(&ds, &q, &mut dk, tokens, tokens, dh);

            scatter_add(&dq, b * tokens, tokens, h * dh, dh, three_d, dst);
            scatter_add(&dk, b * tokens, tokens, d + h * dh, dh, three_d, dst);
            scatter_add(&dv, b * tokens, tokens, 2 * d + h * dh, dh, three_d, dst);
        }
    }
}

/// Bilinear resampling stencil from a `src x src` grid to a `dst x dst` grid.
/// Yields `((dst_cell, src_cell), weight)` pairs; weights per dst cell sum to 1.
fn bilinear_cells(src: usize, dst: usize) -> Vec<((usize, usize), f64)> {
    let mut out = Vec::new();
    let scale = src as f64 / dst as f64;
    for oy in 0..dst {
        let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src - 1);
        let fy = sy - y0 as f64;
        for ox in 0..dst {
            let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            let fx = sx - x0 as f64;
            let dcell = oy * dst + ox;
            for (ycell, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xcell, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let w = wy * wx;
                    if w != 0.0 {
                        out.push(((dcell, ycell * src + xcell), w));
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, CoordSelection};
    use crate::rng::Stream;
    use std::collections::BTreeMap;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn rand_t(shape: &[usize], rng: &mut Stream) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn matmul_identity() {
        let g: Graph<f64> = Graph::new();
        let i2 = g.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(i2, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let g: Graph<f64> = Graph::new();
        let a = g.constant(t64(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t64(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = Stream::new(5);
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), rand_t(&[3, 4], &mut rng));
        params.insert("b".to_string(), rand_t(&[4, 2], &mut rng));
        let rep = grad_check(
            |g, vars| {
                let c = g.matmul(vars["a"], vars["b"]).unwrap();
                g.sum_all(c)
            },
            &params,
            1e-5,
            CoordSelection::All,
        );
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn activation_fixed_points() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(t64(&[4], &[0.0, 0.0, -3.0, 3.0]));
        let gelu = g.activation(x, ActKind::Gelu);
        let sig = g.activation(x, ActKind::Sigmoid);
        let relu = g.activation(x, ActKind::Relu);
        assert_eq!(g.value(gelu).data()[0], 0.0);
        assert_eq!(g.value(sig).data()[1], 0.5);
        assert_eq!(g.value(relu).data()[2], 0.0);
        assert_eq!(g.value(relu).data()[3], 3.0);
    }

    #[test]
    fn softmax_trivial_and_stabilized() {
        let g: Graph<f64> = Graph::new();
        let a = g.constant(t64(&[1, 2], &[0.0, 0.0]));
        let big = g.constant(t64(&[1, 2], &[1000.0, 1000.0]));
        let ln3 = g.constant(t64(&[1, 2], &[3.0f64.ln(), 0.0]));
        assert_eq!(g.value(g.softmax_last(a)).data(), &[0.5, 0.5]);
        assert_eq!(g.value(g.softmax_last(big)).data(), &[0.5, 0.5]);
        let got = g.value(g.softmax_last(ln3));
        assert!((got.data()[0] - 0.75).abs() < 1e-12);
        assert!((got.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_is_log_of_softmax() {
        let mut rng = Stream::new(8);
        for _ in 0..50 {
            let g: Graph<f64> = Graph::new();
            let x = g.constant(rand_t(&[3, 7], &mut rng));
            let sm = g.value(g.softmax_last(x));
            let lsm = g.value(g.log_softmax_last(x));
            for (s, l) in sm.data().iter().zip(lsm.data()) {
                assert!((s.ln() - l).abs() < 1e-6);
            }
            // rows sum to 1
            for r in 0..3 {
                let s: f64 = sm.data()[r * 7..(r + 1) * 7].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_hand_case() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(t64(&[1, 2], &[1.0, 3.0]));
        let gamma = g.constant(t64(&[2], &[1.0, 1.0]));
        let beta = g.constant(t64(&[2], &[0.0, 0.0]));
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        let v = g.value(y);
        assert!((v.data()[0] + 1.0).abs() < 1e-12);
        assert!((v.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_gives_beta() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(t64(&[1, 3], &[5.0, 5.0, 5.0]));
        let gamma = g.constant(t64(&[3], &[2.0, 2.0, 2.0]));
        let beta = g.constant(t64(&[3], &[0.3, 0.4, 0.5]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let v = g.value(y);
        assert!((v.data()[0] - 0.3).abs() < 1e-9);
        assert!((v.data()[2] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = Stream::new(21);
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), rand_t(&[4, 6], &mut rng));
        params.insert("g".to_string(), rand_t(&[6], &mut rng));
        params.insert("b".to_string(), rand_t(&[6], &mut rng));
        let rep = grad_check(
            |g, vars| {
                let y = g.layer_norm(vars["x"], vars["g"], vars["b"], 1e-5).unwrap();
                // weight the outputs so the check is not symmetric
                let w = g.constant(Tensor::from_fn(&[4, 6], |i| 0.1 * (i as f64 + 1.0)));
                let wy = g.mul(y, w).unwrap();
                g.sum_all(wy)
            },
            &params,
            1e-5,
            CoordSelection::All,
        );
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn cross_entropy_uniform_case() {
        let g: Graph<f64> = Graph::new();
        let logits = g.constant(t64(&[1, 2], &[0.0, 0.0]));
        let target = t64(&[1, 2], &[0.5, 0.5]);
        let loss = g.cross_entropy_soft(logits, &target, 1.0).unwrap();
        assert!((g.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_arithmetic() {
        let g: Graph<f64> = Graph::new();
        let logits = g.constant(t64(&[1, 2], &[3.0f64.ln(), 0.0]));
        let target = t64(&[1, 2], &[1.0, 0.0]);
        let loss = g.cross_entropy_soft(logits, &target, 1.0).unwrap();
        assert!((g.value(loss).item() - (-0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_tau() {
        let g: Graph<f64> = Graph::new();
        let logits = g.constant(t64(&[1, 2], &[0.0, 0.0]));
        let target = t64(&[1, 2], &[0.5, 0.5]);
        assert!(g.cross_entropy_soft(logits, &target, 0.0).is_err());
        assert!(g.cross_entropy_soft(logits, &target, -1.0).is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_target() {
        let mut rng = Stream::new(12);
        for seed in 0..20 {
            let mut s = Stream::tagged(77, seed);
            let b = 3;
            let k = 5;
            let tau = 0.7;
            let logits = Tensor::from_fn(&[b, k], |_| s.uniform(-2.0, 2.0));
            // random target distributions
            let mut target = Tensor::from_fn(&[b, k], |_| s.uniform(0.01, 1.0));
            for r in 0..b {
                let sum: f64 = target.data()[r * k..(r + 1) * k].iter().sum();
                for x in &mut target.data_mut()[r * k..(r + 1) * k] {
                    *x /= sum;
                }
            }
            let g: Graph<f64> = Graph::new();
            let lv = g.leaf(logits.clone(), true);
            let loss = g.cross_entropy_soft(lv, &target, tau).unwrap();
            g.backward(loss).unwrap();
            let grad = g.grad(lv).unwrap();
            // analytic: (softmax(logits/tau) - target) / (tau * B)
            let gs: Graph<f64> = Graph::new();
            let scaled = gs.constant(logits.map(|x| x / tau));
            let sm = gs.value(gs.softmax_last(scaled));
            for i in 0..b * k {
                let want = (sm.data()[i] - target.data()[i]) / (tau * b as f64);
                assert!((grad.data()[i] - want).abs() < 1e-10);
            }
            let _ = rng.next_u64();
        }
        // and against finite differences
        let mut params = BTreeMap::new();
        params.insert("l".to_string(), rand_t(&[2, 4], &mut rng));
        let target = t64(&[2, 4], &[0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25]);
        let rep = grad_check(
            |g, vars| g.cross_entropy_soft(vars["l"], &target.cast(), 0.5).unwrap(),
            &params,
            1e-5,
            CoordSelection::All,
        );
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3, 4]), true);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_product_rule() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.leaf(Tensor::scalar(3.0), true);
        let p = g.mul(x, y).unwrap();
        let root = g.sum_all(p);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 3.0);
        assert_eq!(g.grad(y).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_accumulates_and_reset_clears() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::scalar(4.0), true);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
        g.reset_grads();
        assert!(g.grad(x).is_none());
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn backward_deterministic_across_reset() {
        let mut rng = Stream::new(31);
        let x0 = rand_t(&[8, 16], &mut rng);
        let w0 = rand_t(&[16, 8], &mut rng);
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(x0, true);
        let w = g.leaf(w0, true);
        let y = g.matmul(x, w).unwrap();
        let a = g.activation(y, ActKind::Gelu);
        let root = g.sum_all(a);
        g.backward(root).unwrap();
        let g1 = g.grad(w).unwrap();
        g.reset_grads();
        g.backward(root).unwrap();
        let g2 = g.grad(w).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn atomic_ops_pass_grad_check_many_seeds() {
        for seed in 0..12 {
            let mut rng = Stream::tagged(99, seed);
            let mut params = BTreeMap::new();
            params.insert("x".to_string(), rand_t(&[3, 5], &mut rng));
            params.insert("y".to_string(), rand_t(&[3, 5], &mut rng));
            let rep = grad_check(
                |g, v| {
                    let a = g.activation(v["x"], ActKind::Gelu);
                    let b = g.activation(v["y"], ActKind::Sigmoid);
                    let m = g.mul(a, b).unwrap();
                    let t = g.activation(m, ActKind::Tanh);
                    let sm = g.softmax_last(t);
                    g.sum_all(g.mul(sm, v["x"]).unwrap())
                },
                &params,
                1e-5,
                CoordSelection::All,
            );
            assert!(rep.passes(1e-4), "seed {seed}: {}", rep.max_rel_err);
        }
    }

    #[test]
    fn mha_backward_matches_finite_differences() {
        let mut rng = Stream::new(41);
        let (b, t, heads, d) = (2, 4, 2, 6);
        let mut params = BTreeMap::new();
        params.insert("qkv".to_string(), rand_t(&[b * t, 3 * d], &mut rng));
        let rep = grad_check(
            |g, v| {
                let o = g.mha(v["qkv"], b, t, heads).unwrap();
                let w = g.constant(Tensor::from_fn(&[b * t, d], |i| ((i % 7) as f64 - 3.0) * 0.2));
                g.sum_all(g.mul(o, w).unwrap())
            },
            &params,
            1e-5,
            CoordSelection::All,
        );
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn mha_attention_rows_sum_to_one() {
        let mut rng = Stream::new(43);
        let g: Graph<f64> = Graph::new();
        let qkv = g.constant(rand_t(&[3 * 5, 3 * 8], &mut rng));
        let o = g.mha(qkv, 3, 5, 4).unwrap();
        let probs = g.mha_probs(o).unwrap();
        let t = 5;
        for row in probs.data().chunks(t) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn weight_norm_and_l2_normalize_pass_grad_check() {
        let mut rng = Stream::new(55);
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), rand_t(&[4, 6], &mut rng));
        params.insert("v".to_string(), rand_t(&[5, 6], &mut rng));
        let rep = grad_check(
            |g, vars| {
                let n = g.l2_normalize_rows(vars["x"]);
                let y = g.weight_norm_linear(n, vars["v"]).unwrap();
                let w = g.constant(Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.37).sin()));
                g.sum_all(g.mul(y, w).unwrap())
            },
            &params,
            1e-5,
            CoordSelection::All,
        );
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn structural_ops_pass_grad_check() {
        let mut rng = Stream::new(67);
        let mut params = BTreeMap::new();
        params.insert("img".to_string(), rand_t(&[2, 3, 8, 8], &mut rng));
        params.insert("cls".to_string(), rand_t(&[1, 5], &mut rng));
        params.insert("pos".to_string(), rand_t(&[1 + 4, 5], &mut rng));
        params.insert("w".to_string(), rand_t(&[3 * 4 * 4, 5], &mut rng));
        let rep = grad_check(
            |g, v| {
                let p = g.extract_patches(v["img"], 4).unwrap();
                let e = g.matmul(p, v["w"]).unwrap();
                let tok = g.prepend_cls(e, v["cls"], 2).unwrap();
                let ip = g.interp_pos(v["pos"], 2, 2).unwrap();
                let tok = g.add_pos(tok, ip, 2).unwrap();
                let cls = g.gather_cls(tok, 5).unwrap();
                let row = g.slice_rows(cls, 0, 2).unwrap();
                let m = g.mean_rows(row).unwrap();
                g.sum_all(m)
            },
            &params,
            1e-5,
            CoordSelection::All,
        );
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn interp_pos_identity_and_midpoint() {
        let g: Graph<f64> = Graph::new();
        // G=2 grid with columns [0,1]; CLS row first
        let pos = g.constant(t64(&[5, 1], &[9.0, 0.0, 1.0, 0.0, 1.0]));
        let same = g.interp_pos(pos, 2, 2).unwrap();
        assert_eq!(g.value(same).data(), g.value(pos).data());
        let up = g.interp_pos(pos, 2, 3).unwrap();
        let v = g.value(up);
        // middle column of each row interpolates to 0.5; CLS copied
        assert_eq!(v.data()[0], 9.0);
        assert!((v.data()[1 + 1] - 0.5).abs() < 1e-12);
        assert!((v.data()[1 + 4] - 0.5).abs() < 1e-12);
        assert!((v.data()[1 + 7] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn interp_pos_constant_table_stays_constant() {
        let g: Graph<f64> = Graph::new();
        let pos = g.constant(Tensor::full(&[5, 3], 0.7));
        let up = g.interp_pos(pos, 2, 4).unwrap();
        assert!(g.value(up).data().iter().all(|&x| (x - 0.7).abs() < 1e-12));
    }

    #[test]
    fn grad_check_linear_function_is_exact() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), t64(&[3], &[0.5, -1.0, 2.0]));
        let rep = grad_check(
            |g, v| {
                let w = g.constant(t64(&[3], &[2.0, 3.0, -1.0]));
                g.sum_all(g.mul(v["x"], w).unwrap())
            },
            &params,
            1e-4,
            CoordSelection::All,
        );
        assert!(rep.max_rel_err < 1e-10, "{}", rep.max_rel_err);
    }

    #[test]
    fn softmax_xent_composite_grad_check() {
        for seed in 0..10 {
            let mut rng = Stream::tagged(7070, seed);
            let mut params = BTreeMap::new();
            params.insert("l".to_string(), rand_t(&[4, 6], &mut rng));
            let mut target = Tensor::from_fn(&[4, 6], |_| rng.uniform(0.05, 1.0));
            for r in 0..4 {
                let s: f64 = target.data()[r * 6..(r + 1) * 6].iter().sum();
                for x in &mut target.data_mut()[r * 6..(r + 1) * 6] {
                    *x /= s;
                }
            }
            let rep = grad_check(
                |g, v| g.cross_entropy_soft(v["l"], &target, 0.8).unwrap(),
                &params,
                1e-5,
                CoordSelection::All,
            );
            assert!(rep.passes(1e-4), "seed {seed}: {}", rep.max_rel_err);
        }
    }

    #[test]
    fn teacher_branch_gets_no_gradient() {
        let g: Graph<f64> = Graph::new();
        let student = g.leaf(Tensor::scalar(1.0), true);
        let teacher = g.leaf(Tensor::scalar(2.0), false);
        let p = g.mul(student, teacher).unwrap();
        let root = g.sum_all(p);
        g.backward(root).unwrap();
        assert!(g.grad(student).is_some());
        assert!(g.grad(teacher).is_none());
    }
}
