//! Reverse-mode automatic differentiation on a tape of tensor ops.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles; calling
//! [`Graph::backward`] on a scalar loss walks the tape in reverse and
//! accumulates gradients into each node that requires them. The tape order
//! is the topological order, and accumulation is plain `+=` in tape order,
//! so gradients are bit-identical across repeated runs.
//!
//! Conventions:
//! - `matmul` collapses leading dimensions of the left operand, so a
//!   `[B, S, k]` tensor times a `[k, n]` weight is a token-wise linear map.
//! - `bmm` is a true batched product over the leading dimension.
//! - Softmax/log-softmax operate over the last dimension with
//!   max-subtraction for stability.
//! - `relu` uses subgradient 0 at the kink.

use crate::error::{Error, Result};
use crate::tensor::{matmul_slices, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Bmm { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    Mul { a: usize, b: usize },
    ScaleRows { a: usize, scale: usize },
    ScaleConst { a: usize, c: f64 },
    Relu { a: usize },
    Log1p { a: usize },
    SoftmaxRows { a: usize },
    LogSoftmaxRows { a: usize },
    SumAll { a: usize },
    MeanAxis1 { a: usize },
    ConcatLast { parts: Vec<usize> },
    SliceLast { a: usize, start: usize, len: usize },
    SliceRows { a: usize, start: usize, len: usize },
    Reshape { a: usize },
    TransposeLast2 { a: usize },
    LayerNormLast { a: usize, eps: f64 },
    MixTokens { a: usize, heads: usize },
    SliceAxis1 { a: usize, index: usize },
    StackAxis1 { parts: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Tape of recorded operations plus their forward values.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn propagates(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    // ---- forward ops ----

    /// `a` (leading dims collapsed to rows) times 2-D `b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if tb.shape().len() != 2 || ta.last_dim() != tb.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_slices(ta.data(), tb.data(), m, k, n, &mut out);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.propagates(&[a.0, b.0]);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, Tensor::new(shape, out)?, rg))
    }

    /// Batched product: `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            matmul_slices(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.propagates(&[a.0, b.0]);
        Ok(self.push(
            Op::Bmm { a: a.0, b: b.0 },
            Tensor::new(vec![bsz, m, n], out)?,
            rg,
        ))
    }

    /// Elementwise add; one side may be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = broadcast_zip(ta, tb, "add", |x, y| x + y)?;
        let rg = self.propagates(&[a.0, b.0]);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, value, rg))
    }

    /// Add a `[n]` or `[1, n]` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let n = ta.last_dim();
        if tb.numel() != n {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.propagates(&[a.0, bias.0]);
        Ok(self.push(Op::AddBias { a: a.0, bias: bias.0 }, value, rg))
    }

    /// Hadamard product; one side may be a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = broadcast_zip(ta, tb, "mul", |x, y| x * y)?;
        let rg = self.propagates(&[a.0, b.0]);
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, value, rg))
    }

    /// Scale each row of `a` by the matching entry of a `[rows, 1]` column.
    pub fn scale_rows(&mut self, a: Var, scale: Var) -> Result<Var> {
        let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[scale.0].value);
        let rows = ta.rows();
        if ts.numel() != rows {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: ta.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let n = ta.last_dim();
        let mut out = ta.data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let s = ts.data()[r];
            for o in row.iter_mut() {
                *o *= s;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.propagates(&[a.0, scale.0]);
        Ok(self.push(
            Op::ScaleRows {
                a: a.0,
                scale: scale.0,
            },
            value,
            rg,
        ))
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let out: Vec<f64> = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).unwrap();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::ScaleConst { a: a.0, c }, value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let out: Vec<f64> = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).unwrap();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Relu { a: a.0 }, value, rg)
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let out: Vec<f64> = ta.data().iter().map(|&x| x.ln_1p()).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).unwrap();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Log1p { a: a.0 }, value, rg)
    }

    /// Row-wise softmax over the last dimension, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if !ta.is_finite() {
            return Err(Error::Numeric("softmax input contains NaN/Inf".into()));
        }
        let value = softmax_tensor(ta);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::SoftmaxRows { a: a.0 }, value, rg))
    }

    /// Row-wise log-softmax over the last dimension, max-subtracted.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if !ta.is_finite() {
            return Err(Error::Numeric("log_softmax input contains NaN/Inf".into()));
        }
        let n = ta.last_dim();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            for o in row.iter_mut() {
                *o -= lse;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::LogSoftmaxRows { a: a.0 }, value, rg))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::SumAll { a: a.0 }, Tensor::scalar(s), rg)
    }

    /// Mean over the middle axis: `[B, S, d] -> [B, d]`.
    pub fn mean_axis1(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        if shape.len() != 3 {
            return Err(Error::Dimension {
                op: "mean_axis1",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        let (bsz, s, d) = (shape[0], shape[1], shape[2]);
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            for t in 0..s {
                for j in 0..d {
                    out[b * d + j] += ta.data()[(b * s + t) * d + j];
                }
            }
        }
        let inv = 1.0 / s as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::MeanAxis1 { a: a.0 }, Tensor::new(vec![bsz, d], out)?, rg))
    }

    /// Concatenate along the last dimension. All leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_last of zero tensors"));
        }
        let lead: Vec<usize> = {
            let s = self.nodes[parts[0].0].value.shape();
            s[..s.len() - 1].to_vec()
        };
        let rows = self.nodes[parts[0].0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape()[..t.shape().len() - 1] != lead[..] {
                return Err(Error::Dimension {
                    op: "concat_last",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.0].value;
            for r in 0..rows {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.propagates(&ids);
        Ok(self.push(Op::ConcatLast { parts: ids }, Tensor::new(shape, out)?, rg))
    }

    /// Contiguous slice `[start, start + len)` of the last dimension.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let n = ta.last_dim();
        if start + len > n {
            return Err(Error::contract(format!(
                "slice_last [{start}, {}) out of width {n}",
                start + len
            )));
        }
        let rows = ta.rows();
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&ta.data()[r * n + start..r * n + start + len]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::SliceLast { a: a.0, start, len }, Tensor::new(shape, out)?, rg))
    }

    /// Contiguous row range `[start, start + len)` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, n) = (ta.shape()[0], ta.shape()[1]);
        if start + len > rows {
            return Err(Error::contract(format!(
                "slice_rows [{start}, {}) out of {rows} rows",
                start + len
            )));
        }
        let out = ta.data()[start * n..(start + len) * n].to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::SliceRows { a: a.0, start, len }, Tensor::new(vec![len, n], out)?, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let value = ta.clone().reshaped(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Reshape { a: a.0 }, value, rg))
    }

    /// Swap the last two dimensions.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        if shape.len() < 2 {
            return Err(Error::Dimension {
                op: "transpose_last2",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batches = ta.numel() / (m * n);
        let mut out = vec![0.0; ta.numel()];
        for b in 0..batches {
            let src = &ta.data()[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut new_shape = shape.to_vec();
        let l = new_shape.len();
        new_shape.swap(l - 2, l - 1);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::TransposeLast2 { a: a.0 }, Tensor::new(new_shape, out)?, rg))
    }

    /// Layer normalization over the last dimension (no learned affine).
    pub fn layer_norm_last(&mut self, a: Var, eps: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let n = ta.last_dim();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for o in row.iter_mut() {
                *o = (*o - mean) * inv;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out).unwrap();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::LayerNormLast { a: a.0, eps }, value, rg)
    }

    /// Multi-head token mixing: output token `t` takes its head-`h` slice
    /// from input token `(t + h) mod S`. A pure permutation of values.
    pub fn mix_tokens(&mut self, a: Var, heads: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        if shape.len() != 3 {
            return Err(Error::Dimension {
                op: "mix_tokens",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        let (bsz, s, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 || s % heads != 0 {
            return Err(Error::config(format!(
                "mix_tokens: heads {heads} must divide d_model {d} and seq_len {s}"
            )));
        }
        let dh = d / heads;
        let mut out = vec![0.0; ta.numel()];
        for b in 0..bsz {
            for t in 0..s {
                for h in 0..heads {
                    let src_t = (t + h) % s;
                    let src = (b * s + src_t) * d + h * dh;
                    let dst = (b * s + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&ta.data()[src..src + dh]);
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::MixTokens { a: a.0, heads }, Tensor::new(shape.to_vec(), out)?, rg))
    }

    /// Extract token `index`: `[B, S, d] -> [B, d]`.
    pub fn slice_axis1(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        if shape.len() != 3 || index >= shape[1] {
            return Err(Error::contract(format!(
                "slice_axis1 index {index} out of shape {shape:?}"
            )));
        }
        let (bsz, s, d) = (shape[0], shape[1], shape[2]);
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            out[b * d..(b + 1) * d]
                .copy_from_slice(&ta.data()[(b * s + index) * d..(b * s + index) * d + d]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::SliceAxis1 { a: a.0, index }, Tensor::new(vec![bsz, d], out)?, rg))
    }

    /// Stack `S` tensors of `[B, d]` into `[B, S, d]`.
    pub fn stack_axis1(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("stack_axis1 of zero tensors"));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if first.len() != 2 {
            return Err(Error::Dimension {
                op: "stack_axis1",
                lhs: first,
                rhs: vec![],
            });
        }
        let (bsz, d) = (first[0], first[1]);
        for p in parts {
            if self.nodes[p.0].value.shape() != [bsz, d] {
                return Err(Error::Dimension {
                    op: "stack_axis1",
                    lhs: first,
                    rhs: self.nodes[p.0].value.shape().to_vec(),
                });
            }
        }
        let s = parts.len();
        let mut out = vec![0.0; bsz * s * d];
        for (t, p) in parts.iter().enumerate() {
            let src = self.nodes[p.0].value.data();
            for b in 0..bsz {
                out[(b * s + t) * d..(b * s + t) * d + d].copy_from_slice(&src[b * d..(b + 1) * d]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.propagates(&ids);
        Ok(self.push(Op::StackAxis1 { parts: ids }, Tensor::new(vec![bsz, s, d], out)?, rg))
    }

    // ---- backward ----

    /// Populate gradients of every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(out_grad) = self.grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                self.grads[id] = Some(out_grad);
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.last_dim());
                    let n = self.nodes[b].value.shape()[1];
                    if self.nodes[a].requires_grad {
                        // dA = dC * B^T
                        let bt = transpose2(self.nodes[b].value.data(), k, n);
                        let mut da = vec![0.0; m * k];
                        matmul_slices(out_grad.data(), &bt, m, n, k, &mut da);
                        self.accumulate(a, Tensor::new(self.nodes[a].value.shape().to_vec(), da)?);
                    }
                    if self.nodes[b].requires_grad {
                        // dB = A^T * dC
                        let at = transpose2(self.nodes[a].value.data(), m, k);
                        let mut db = vec![0.0; k * n];
                        matmul_slices(&at, out_grad.data(), k, m, n, &mut db);
                        self.accumulate(b, Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::Bmm { a, b } => {
                    let sa = self.nodes[a].value.shape().to_vec();
                    let sb = self.nodes[b].value.shape().to_vec();
                    let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    if self.nodes[a].requires_grad {
                        let mut da = vec![0.0; bsz * m * k];
                        for i in 0..bsz {
                            let bt = transpose2(&self.nodes[b].value.data()[i * k * n..(i + 1) * k * n], k, n);
                            matmul_slices(
                                &out_grad.data()[i * m * n..(i + 1) * m * n],
                                &bt,
                                m,
                                n,
                                k,
                                &mut da[i * m * k..(i + 1) * m * k],
                            );
                        }
                        self.accumulate(a, Tensor::new(sa.clone(), da)?);
                    }
                    if self.nodes[b].requires_grad {
                        let mut db = vec![0.0; bsz * k * n];
                        for i in 0..bsz {
                            let at = transpose2(&self.nodes[a].value.data()[i * m * k..(i + 1) * m * k], m, k);
                            matmul_slices(
                                &at,
                                &out_grad.data()[i * m * n..(i + 1) * m * n],
                                k,
                                m,
                                n,
                                &mut db[i * k * n..(i + 1) * k * n],
                            );
                        }
                        self.accumulate(b, Tensor::new(sb, db)?);
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a].requires_grad {
                        let g = reduce_to_operand(&out_grad, &self.nodes[a].value);
                        self.accumulate(a, g);
                    }
                    if self.nodes[b].requires_grad {
                        let g = reduce_to_operand(&out_grad, &self.nodes[b].value);
                        self.accumulate(b, g);
                    }
                }
                Op::AddBias { a, bias } => {
                    if self.nodes[a].requires_grad {
                        self.accumulate(a, out_grad.clone());
                    }
                    if self.nodes[bias].requires_grad {
                        let n = self.nodes[bias].value.numel();
                        let mut g = vec![0.0; n];
                        for row in out_grad.data().chunks(n) {
                            for (gi, &r) in g.iter_mut().zip(row) {
                                *gi += r;
                            }
                        }
                        self.accumulate(bias, Tensor::new(self.nodes[bias].value.shape().to_vec(), g)?);
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a].requires_grad {
                        let scaled = mul_against(&out_grad, &self.nodes[b].value);
                        let g = reduce_to_operand(&scaled, &self.nodes[a].value);
                        self.accumulate(a, g);
                    }
                    if self.nodes[b].requires_grad {
                        let scaled = mul_against(&out_grad, &self.nodes[a].value);
                        let g = reduce_to_operand(&scaled, &self.nodes[b].value);
                        self.accumulate(b, g);
                    }
                }
                Op::ScaleRows { a, scale } => {
                    let n = self.nodes[a].value.last_dim();
                    if self.nodes[a].requires_grad {
                        let mut g = out_grad.data().to_vec();
                        for (r, row) in g.chunks_mut(n).enumerate() {
                            let s = self.nodes[scale].value.data()[r];
                            row.iter_mut().for_each(|x| *x *= s);
                        }
                        self.accumulate(a, Tensor::new(self.nodes[a].value.shape().to_vec(), g)?);
                    }
                    if self.nodes[scale].requires_grad {
                        let rows = self.nodes[a].value.rows();
                        let mut g = vec![0.0; rows];
                        for r in 0..rows {
                            g[r] = out_grad.data()[r * n..(r + 1) * n]
                                .iter()
                                .zip(&self.nodes[a].value.data()[r * n..(r + 1) * n])
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                        self.accumulate(scale, Tensor::new(self.nodes[scale].value.shape().to_vec(), g)?);
                    }
                }
                Op::ScaleConst { a, c } => {
                    let g: Vec<f64> = out_grad.data().iter().map(|x| x * c).collect();
                    self.accumulate(a, Tensor::new(out_grad.shape().to_vec(), g)?);
                }
                Op::Relu { a } => {
                    let g: Vec<f64> = out_grad
                        .data()
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(&go, &x)| if x > 0.0 { go } else { 0.0 })
                        .collect();
                    self.accumulate(a, Tensor::new(out_grad.shape().to_vec(), g)?);
                }
                Op::Log1p { a } => {
                    let g: Vec<f64> = out_grad
                        .data()
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(&go, &x)| go / (1.0 + x))
                        .collect();
                    self.accumulate(a, Tensor::new(out_grad.shape().to_vec(), g)?);
                }
                Op::SoftmaxRows { a } => {
                    let y = self.nodes[id].value.data();
                    let n = self.nodes[id].value.last_dim();
                    let mut g = vec![0.0; y.len()];
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &out_grad.data()[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(a, Tensor::new(out_grad.shape().to_vec(), g)?);
                }
                Op::LogSoftmaxRows { a } => {
                    let ls = self.nodes[id].value.data();
                    let n = self.nodes[id].value.last_dim();
                    let mut g = vec![0.0; ls.len()];
                    for r in 0..ls.len() / n {
                        let lr = &ls[r * n..(r + 1) * n];
                        let gr = &out_grad.data()[r * n..(r + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            g[r * n + j] = gr[j] - lr[j].exp() * gsum;
                        }
                    }
                    self.accumulate(a, Tensor::new(out_grad.shape().to_vec(), g)?);
                }
                Op::SumAll { a } => {
                    let go = out_grad.data()[0];
                    let shape = self.nodes[a].value.shape().to_vec();
                    self.accumulate(a, Tensor::full(shape, go));
                }
                Op::MeanAxis1 { a } => {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let (bsz, s, d) = (shape[0], shape[1], shape[2]);
                    let inv = 1.0 / s as f64;
                    let mut g = vec![0.0; bsz * s * d];
                    for b in 0..bsz {
                        for t in 0..s {
                            for j in 0..d {
                                g[(b * s + t) * d + j] = out_grad.data()[b * d + j] * inv;
                            }
                        }
                    }
                    self.accumulate(a, Tensor::new(shape, g)?);
                }
                Op::ConcatLast { parts } => {
                    let total = self.nodes[id].value.last_dim();
                    let rows = self.nodes[id].value.rows();
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p].value.last_dim();
                        if self.nodes[p].requires_grad {
                            let mut g = vec![0.0; rows * w];
                            for r in 0..rows {
                                g[r * w..(r + 1) * w]
                                    .copy_from_slice(&out_grad.data()[r * total + off..r * total + off + w]);
                            }
                            self.accumulate(p, Tensor::new(self.nodes[p].value.shape().to_vec(), g)?);
                        }
                        off += w;
                    }
                }
                Op::SliceLast { a, start, len } => {
                    let n = self.nodes[a].value.last_dim();
                    let rows = self.nodes[a].value.rows();
                    let mut g = vec![0.0; rows * n];
                    for r in 0..rows {
                        g[r * n + start..r * n + start + len]
                            .copy_from_slice(&out_grad.data()[r * len..(r + 1) * len]);
                    }
                    self.accumulate(a, Tensor::new(self.nodes[a].value.shape().to_vec(), g)?);
                }
                Op::SliceRows { a, start, len } => {
                    let (rows, n) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                    let mut g = vec![0.0; rows * n];
                    g[start * n..(start + len) * n].copy_from_slice(out_grad.data());
                    self.accumulate(a, Tensor::new(vec![rows, n], g)?);
                }
                Op::Reshape { a } => {
                    let shape = self.nodes[a].value.shape().to_vec();
                    self.accumulate(a, Tensor::new(shape, out_grad.data().to_vec())?);
                }
                Op::TransposeLast2 { a } => {
                    let shape = self.nodes[id].value.shape().to_vec();
                    let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    let batches = out_grad.numel() / (m * n);
                    let mut g = vec![0.0; out_grad.numel()];
                    for b in 0..batches {
                        let src = &out_grad.data()[b * m * n..(b + 1) * m * n];
                        let dst = &mut g[b * m * n..(b + 1) * m * n];
                        for i in 0..m {
                            for j in 0..n {
                                dst[j * m + i] = src[i * n + j];
                            }
                        }
                    }
                    self.accumulate(a, Tensor::new(self.nodes[a].value.shape().to_vec(), g)?);
                }
                Op::LayerNormLast { a, eps } => {
                    let x = self.nodes[a].value.data();
                    let y = self.nodes[id].value.data();
                    let n = self.nodes[a].value.last_dim();
                    let mut g = vec![0.0; x.len()];
                    for r in 0..x.len() / n {
                        let xr = &x[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &out_grad.data()[r * n..(r + 1) * n];
                        let mean = xr.iter().sum::<f64>() / n as f64;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = gr.iter().sum::<f64>() / n as f64;
                        let gydot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            g[r * n + j] = inv * (gr[j] - gmean - yr[j] * gydot);
                        }
                    }
                    self.accumulate(a, Tensor::new(self.nodes[a].value.shape().to_vec(), g)?);
                }
                Op::MixTokens { a, heads } => {
                    // inverse permutation: source token t, head h landed at (t - h) mod S
                    let shape = self.nodes[a].value.shape().to_vec();
                    let (bsz, s, d) = (shape[0], shape[1], shape[2]);
                    let dh = d / heads;
                    let mut g = vec![0.0; out_grad.numel()];
                    for b in 0..bsz {
                        for t in 0..s {
                            for h in 0..heads {
                                let src_t = (t + h) % s;
                                let dst = (b * s + t) * d + h * dh;
                                let src = (b * s + src_t) * d + h * dh;
                                for j in 0..dh {
                                    g[src + j] += out_grad.data()[dst + j];
                                }
                            }
                        }
                    }
                    self.accumulate(a, Tensor::new(shape, g)?);
                }
                Op::SliceAxis1 { a, index } => {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let (bsz, s, d) = (shape[0], shape[1], shape[2]);
                    let mut g = vec![0.0; bsz * s * d];
                    for b in 0..bsz {
                        g[(b * s + index) * d..(b * s + index) * d + d]
                            .copy_from_slice(&out_grad.data()[b * d..(b + 1) * d]);
                    }
                    self.accumulate(a, Tensor::new(shape, g)?);
                }
                Op::StackAxis1 { parts } => {
                    let s = parts.len();
                    let bsz = self.nodes[id].value.shape()[0];
                    let d = self.nodes[id].value.shape()[2];
                    for (t, p) in parts.into_iter().enumerate() {
                        if self.nodes[p].requires_grad {
                            let mut g = vec![0.0; bsz * d];
                            for b in 0..bsz {
                                g[b * d..(b + 1) * d]
                                    .copy_from_slice(&out_grad.data()[(b * s + t) * d..(b * s + t) * d + d]);
                            }
                            self.accumulate(p, Tensor::new(vec![bsz, d], g)?);
                        }
                    }
                }
            }
            self.grads[id] = Some(out_grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, g: Tensor) {
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn transpose2(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Softmax over the last dimension of a tensor, max-subtracted.
pub fn softmax_tensor(t: &Tensor) -> Tensor {
    let n = t.last_dim();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for o in row.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        for o in row.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

/// Elementwise zip supporting equal shapes or scalar-vs-tensor only.
fn broadcast_zip(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    } else if b.is_scalar() {
        let s = b.data()[0];
        let data = a.data().iter().map(|&x| f(x, s)).collect();
        Tensor::new(a.shape().to_vec(), data)
    } else if a.is_scalar() {
        let s = a.data()[0];
        let data = b.data().iter().map(|&y| f(s, y)).collect();
        Tensor::new(b.shape().to_vec(), data)
    } else {
        Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// Reduce a full-shape gradient back to an operand's shape (handles the
/// scalar-broadcast case; equal shapes pass through).
fn reduce_to_operand(grad: &Tensor, operand: &Tensor) -> Tensor {
    if grad.shape() == operand.shape() {
        grad.clone()
    } else {
        debug_assert!(operand.is_scalar());
        Tensor::new(operand.shape().to_vec(), vec![grad.data().iter().sum()]).unwrap()
    }
}

/// Multiply a gradient by the other operand of a `mul`, honoring the
/// scalar-broadcast rule.
fn mul_against(grad: &Tensor, other: &Tensor) -> Tensor {
    if grad.shape() == other.shape() {
        let data = grad.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Tensor::new(grad.shape().to_vec(), data).unwrap()
    } else {
        debug_assert!(other.is_scalar());
        let s = other.data()[0];
        let data = grad.data().iter().map(|x| x * s).collect();
        Tensor::new(grad.shape().to_vec(), data).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let b = g.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_zero() {
        let mut g = Graph::new();
        let a = g.constant(t(vec![1, 2], vec![1.0, 2.0]));
        let b = g.constant(t(vec![2, 1], vec![0.0, 0.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[0.0]);
    }

    // Hand brute-force dot products: [[1,2],[3,4]] x [[5],[6]] = [[17],[39]].
    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(vec![2, 1], vec![5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log1p_values() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![2], vec![0.0, std::f64::consts::E - 1.0]));
        let y = g.log1p(x);
        assert!((g.value(y).data()[0]).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_symmetry_and_single() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 2], vec![0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x1 = g.constant(t(vec![1, 1], vec![123.456]));
        let y1 = g.softmax_rows(x1).unwrap();
        assert_eq!(g.value(y1).data(), &[1.0]);
    }

    // Closed-form: softmax([0, ln 3]) = [1/4, 3/4].
    #[test]
    fn softmax_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 2], vec![0.0, 3.0f64.ln()]));
        let y = g.softmax_rows(x).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 2], vec![f64::NAN, 0.0]));
        assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(vec![2], vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    // loss = sum(x) -> grad = ones.
    #[test]
    fn backward_linear() {
        let mut g = Graph::new();
        let x = g.param(t(vec![3], vec![1.0, 2.0, 3.0]));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    // loss = sum(x*x) -> grad = 2x.
    #[test]
    fn backward_quadratic() {
        let mut g = Graph::new();
        let x = g.param(t(vec![2], vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    // Fan-out: x used twice additively -> grads sum.
    #[test]
    fn backward_fanout_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(vec![2], vec![1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_bit_identical_across_runs() {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(t(vec![2, 2], vec![0.3, -0.2, 0.7, 1.1]));
            let w = g.param(t(vec![2, 2], vec![0.5, 0.1, -0.4, 0.9]));
            let h = g.matmul(x, w).unwrap();
            let r = g.relu(h);
            let sm = g.softmax_rows(r).unwrap();
            let s = g.sum_all(sm);
            g.backward(s).unwrap();
            (
                g.grad(x).unwrap().data().to_vec(),
                g.grad(w).unwrap().data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mix_tokens_twice_is_identity_for_s2_h2() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 2, 4], (0..8).map(|i| i as f64).collect()));
        let m1 = g.mix_tokens(x, 2).unwrap();
        let m2 = g.mix_tokens(m1, 2).unwrap();
        assert_eq!(g.value(m2).data(), g.value(x).data());
    }

    #[test]
    fn mix_tokens_is_permutation() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = g.constant(t(vec![2, 2, 6], data.clone()));
        let m = g.mix_tokens(x, 2).unwrap();
        let mut a = data;
        let mut b = g.value(m).data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(vec![2, 1], vec![5.0, 6.0]));
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.slice_last(c, 0, 2).unwrap();
        assert_eq!(g.value(back).data(), g.value(a).data());
    }

    #[test]
    fn transpose_last2_involution() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let xt = g.transpose_last2(x).unwrap();
        assert_eq!(g.value(xt).shape(), &[3, 2]);
        let xtt = g.transpose_last2(xt).unwrap();
        assert_eq!(g.value(xtt).data(), g.value(x).data());
    }
}
