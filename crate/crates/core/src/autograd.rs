//! A small reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so walking them backwards is a valid
//! topological order for the reverse sweep. Fused kernels (layer norm,
//! masked attention, softmax cross-entropy) carry hand-written adjoints.

use crate::tensor::{dot, Matrix};

/// Index of a parameter tensor inside a [`crate::params::ParamStore`].
pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, trans_a: bool, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias { x: Var, bias: Var },
    Mul(Var, Var),
    Affine { a: Var, scale: f64 },
    MulConst { a: Var, factor: Matrix },
    AddConst { a: Var },
    ScaleRows { a: Var, scale: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gather { src: Var, index: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Var, Var),
    RowSelect { on: Var, off: Var, mask: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Attention(Box<AttentionCache>),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
    MeanRowSquaredNorm(Var),
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    seq_len: usize,
    heads: usize,
    lengths: Vec<usize>,
    probs: Vec<f64>,
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.grads[var.0].as_ref()
    }

    /// Parameter gradients, summed over every node that referenced the same
    /// parameter. Parameters the loss does not depend on are omitted.
    pub fn params(&self) -> Vec<(ParamId, Matrix)> {
        let mut out: Vec<(ParamId, Matrix)> = Vec::new();
        for &(id, var) in &self.params {
            let Some(g) = self.grads[var.0].as_ref() else {
                continue;
            };
            match out.iter_mut().find(|(pid, _)| *pid == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((id, g.clone())),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input. No gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used by tests and probes).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, value: Matrix) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Var {
        let value = Matrix::matmul(self.value(a), trans_a, self.value(b), trans_b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, trans_a, b, trans_b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// `x + bias` with `bias` of shape `[1, cols]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let vb = self.value(bias);
        let mut value = self.value(x).clone();
        assert_eq!(vb.shape(), (1, value.cols()), "bias shape mismatch");
        let b = vb.data().to_vec();
        for r in 0..value.rows() {
            for (o, bi) in value.row_mut(r).iter_mut().zip(&b) {
                *o += bi;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(value, Op::AddRowBias { x, bias }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(value, Op::Affine { a, scale }, ng)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// Elementwise product with a constant (dropout masks, modulation).
    pub fn mul_const(&mut self, a: Var, factor: Matrix) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), factor.shape(), "mul_const shape mismatch");
        let data = va.data().iter().zip(factor.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(a);
        self.push(value, Op::MulConst { a, factor }, ng)
    }

    pub fn add_const(&mut self, a: Var, offset: &Matrix) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(offset);
        let ng = self.ng(a);
        self.push(value, Op::AddConst { a }, ng)
    }

    /// Multiplies row `r` by `scale[r]`.
    pub fn scale_rows(&mut self, a: Var, scale: Vec<f64>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(scale.len(), value.rows(), "scale_rows length mismatch");
        for (r, s) in scale.iter().enumerate() {
            for x in value.row_mut(r) {
                *x *= s;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::ScaleRows { a, scale }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| {
            let u = GELU_C * (x + GELU_K * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    /// Row gather: output row `r` is `src[index[r]]`.
    pub fn gather(&mut self, src: Var, index: Vec<usize>) -> Var {
        let value = self.value(src).select_rows(&index);
        let ng = self.ng(src);
        self.push(value, Op::Gather { src, index }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(start <= end && end <= va.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(va.rows(), end - start);
        for r in 0..va.rows() {
            value.row_mut(r).copy_from_slice(&va.row(r)[start..end]);
        }
        let ng = self.ng(a);
        self.push(value, Op::SliceCols { a, start }, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat_cols row mismatch");
        let (ca, cb) = (va.cols(), vb.cols());
        let mut value = Matrix::zeros(va.rows(), ca + cb);
        for r in 0..va.rows() {
            let row = value.row_mut(r);
            row[..ca].copy_from_slice(va.row(r));
            row[ca..].copy_from_slice(vb.row(r));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatCols(a, b), ng)
    }

    /// Row-wise select: row `r` comes from `on` when `mask[r]`, else from `off`.
    /// Rows are copied, not blended, so unselected rows cannot leak.
    pub fn row_select(&mut self, on: Var, off: Var, mask: Vec<bool>) -> Var {
        let (von, voff) = (self.value(on), self.value(off));
        assert_eq!(von.shape(), voff.shape(), "row_select shape mismatch");
        assert_eq!(mask.len(), von.rows(), "row_select mask length");
        let mut value = voff.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                value.row_mut(r).copy_from_slice(von.row(r));
            }
        }
        let ng = self.ng(on) || self.ng(off);
        self.push(value, Op::RowSelect { on, off, mask }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(g.len(), cols);
        assert_eq!(b.len(), cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut value = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let out = value.row_mut(r);
            for j in 0..cols {
                out[j] = g[j] * xh[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention over left-padded sequences.
    ///
    /// `q`, `k`, `v` are `[batch * seq_len, d]`. Row block `b` has
    /// `lengths[b]` real positions at the end of the block; keys outside
    /// that range are excluded from the softmax and pad queries produce zero
    /// rows. No causal mask is applied.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize, lengths: Vec<usize>) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = vq.shape();
        assert_eq!(vk.shape(), (rows, d));
        assert_eq!(vv.shape(), (rows, d));
        assert_eq!(rows, lengths.len() * seq_len, "attention batch mismatch");
        assert_eq!(d % heads, 0, "model width must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(rows, d);
        let mut probs = vec![0.0; lengths.len() * heads * seq_len * seq_len];
        let mut scores = vec![0.0; seq_len];
        for (b, &len) in lengths.iter().enumerate() {
            assert!(len >= 1 && len <= seq_len, "sequence length {len} out of range");
            let start = seq_len - len;
            let base = b * seq_len;
            for h in 0..heads {
                let cs = h * dh;
                for i in start..seq_len {
                    let qi = &vq.row(base + i)[cs..cs + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in start..seq_len {
                        let s = dot(qi, &vk.row(base + j)[cs..cs + dh]) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut denom = 0.0;
                    for s in &mut scores[start..seq_len] {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let p_off = ((b * heads + h) * seq_len + i) * seq_len;
                    let orow = &mut out.row_mut(base + i)[cs..cs + dh];
                    for j in start..seq_len {
                        let p = scores[j] / denom;
                        probs[p_off + j] = p;
                        for (o, vj) in orow.iter_mut().zip(&vv.row(base + j)[cs..cs + dh]) {
                            *o += p * vj;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                seq_len,
                heads,
                lengths,
                probs,
            })),
            ng,
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`. Returns `[1, 1]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let vl = self.value(logits);
        let (rows, cols) = vl.shape();
        assert_eq!(targets.len(), rows, "one target per row");
        let mut probs = Matrix::zeros(rows, cols);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < cols, "target {t} out of range for {cols} classes");
            let row = vl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let pr = probs.row_mut(r);
            for (p, &z) in pr.iter_mut().zip(row) {
                *p = (z - max).exp();
                denom += *p;
            }
            for p in pr.iter_mut() {
                *p /= denom;
            }
            total += max + denom.ln() - row[t];
        }
        let value = Matrix::scalar(if rows == 0 { 0.0 } else { total / rows as f64 });
        let ng = self.ng(logits);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        )
    }

    /// Mean over rows of the squared L2 norm of each row. Returns `[1, 1]`.
    pub fn mean_row_squared_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let total: f64 = (0..va.rows()).map(|r| va.row(r).iter().map(|x| x * x).sum::<f64>()).sum();
        let value = Matrix::scalar(if va.rows() == 0 { 0.0 } else { total / va.rows() as f64 });
        let ng = self.ng(a);
        self.push(value, Op::MeanRowSquaredNorm(a), ng)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], var: Var, delta: Matrix) {
        if !self.ng(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn zeros_like(&self, var: Var) -> Matrix {
        let (r, c) = self.value(var).shape();
        Matrix::zeros(r, c)
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, trans_a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    // C = op(A) op(B): dA = g op(B)^T, transposed back if A was.
                    let da = if *trans_a {
                        Matrix::matmul(vb, *trans_b, g, true)
                    } else {
                        Matrix::matmul(g, false, vb, !*trans_b)
                    };
                    self.accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let db = if *trans_b {
                        Matrix::matmul(g, true, va, *trans_a)
                    } else {
                        Matrix::matmul(va, !*trans_a, g, false)
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::AddRowBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.ng(*bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Matrix::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::Affine { a, scale } => {
                let s = *scale;
                self.accumulate(grads, *a, g.map(|x| s * x));
            }
            Op::MulConst { a, factor } => {
                let d = g.data().iter().zip(factor.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::AddConst { a } => self.accumulate(grads, *a, g.clone()),
            Op::ScaleRows { a, scale } => {
                let mut d = g.clone();
                for (r, s) in scale.iter().enumerate() {
                    for x in d.row_mut(r) {
                        *x *= s;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(gi, &x)| {
                        let u = GELU_C * (x + GELU_K * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        gi * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                    })
                    .collect();
                self.accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(gi, s)| gi * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(gi, t)| gi * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::Gather { src, index } => {
                if self.ng(*src) {
                    let mut d = self.zeros_like(*src);
                    for (r, &i) in index.iter().enumerate() {
                        for (o, v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::SliceCols { a, start } => {
                let mut d = self.zeros_like(*a);
                let w = g.cols();
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = g.cols() - ca;
                let mut da = Matrix::zeros(g.rows(), ca);
                let mut db = Matrix::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::RowSelect { on, off, mask } => {
                let mut don = Matrix::zeros(g.rows(), g.cols());
                let mut doff = Matrix::zeros(g.rows(), g.cols());
                for (r, &m) in mask.iter().enumerate() {
                    let dst = if m { &mut don } else { &mut doff };
                    dst.row_mut(r).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *on, don);
                self.accumulate(grads, *off, doff);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gv = self.value(*gain).data();
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        for j in 0..cols {
                            dg.data_mut()[j] += gr[j] * xr[j];
                            db.data_mut()[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                    self.accumulate(grads, *bias, db);
                }
                if self.ng(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    let mut dxh = vec![0.0; cols];
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        for j in 0..cols {
                            dxh[j] = gr[j] * gv[j];
                        }
                        let sum_d: f64 = dxh.iter().sum();
                        let sum_dx: f64 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let out = dx.row_mut(r);
                        for j in 0..cols {
                            out[j] = inv_std[r] / n * (n * dxh[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let scale = g.item() / targets.len().max(1) as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[t] -= 1.0;
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::MeanRowSquaredNorm(a) => {
                let va = self.value(*a);
                let s = 2.0 * g.item() / va.rows().max(1) as f64;
                self.accumulate(grads, *a, va.map(|x| s * x));
            }
        }
    }

    fn attention_backward(&self, c: &AttentionCache, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let (vq, vk, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (rows, d) = vq.shape();
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let l = c.seq_len;
        let mut dq = Matrix::zeros(rows, d);
        let mut dk = Matrix::zeros(rows, d);
        let mut dv = Matrix::zeros(rows, d);
        let mut dp = vec![0.0; l];
        for (b, &len) in c.lengths.iter().enumerate() {
            let start = l - len;
            let base = b * l;
            for h in 0..c.heads {
                let cs = h * dh;
                for i in start..l {
                    let p_off = ((b * c.heads + h) * l + i) * l;
                    let gi = &g.row(base + i)[cs..cs + dh];
                    let mut weighted = 0.0;
                    for j in start..l {
                        let p = c.probs[p_off + j];
                        dp[j] = dot(gi, &vv.row(base + j)[cs..cs + dh]);
                        weighted += p * dp[j];
                        for (o, x) in dv.row_mut(base + j)[cs..cs + dh].iter_mut().zip(gi) {
                            *o += p * x;
                        }
                    }
                    for j in start..l {
                        let ds = c.probs[p_off + j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &vk.row(base + j)[cs..cs + dh];
                        for (o, x) in dq.row_mut(base + i)[cs..cs + dh].iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let qi = &vq.row(base + i)[cs..cs + dh];
                        for (o, x) in dk.row_mut(base + j)[cs..cs + dh].iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        self.accumulate(grads, c.q, dq);
        self.accumulate(grads, c.k, dk);
        self.accumulate(grads, c.v, dv);
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    fn pseudo(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    /// Checks d(sum(w * op(x)))/dx against finite differences.
    fn check_unary(x: Matrix, op: impl Fn(&mut Graph, Var) -> Var) {
        let (r, c) = {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let y = op(&mut g, v);
            g.value(y).shape()
        };
        let w = pseudo(r, c, 99);
        let eval = |xm: &Matrix| {
            let mut g = Graph::new();
            let v = g.constant(xm.clone());
            let y = op(&mut g, v);
            dot(g.value(y).data(), w.data())
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let y = op(&mut g, v);
        let wv = g.constant(w.clone());
        let prod = g.mul(y, wv);
        let ones = g.constant(Matrix::filled(1, r, 1.0));
        let s1 = g.matmul(ones, false, prod, false);
        let ones_c = g.constant(Matrix::filled(c, 1, 1.0));
        let loss = g.matmul(s1, false, ones_c, false);
        let grads = g.backward(loss);
        let analytic = grads.wrt(v).unwrap().clone();
        assert_close(&analytic, &numeric_grad(&x, &eval), 1e-6);
    }

    #[test]
    fn elementwise_gradients() {
        let x = pseudo(3, 4, 1);
        check_unary(x.clone(), |g, v| g.gelu(v));
        check_unary(x.clone(), |g, v| g.sigmoid(v));
        check_unary(x.clone(), |g, v| g.tanh(v));
        check_unary(x.clone(), |g, v| g.affine(v, -2.0, 1.0));
        check_unary(x.clone(), |g, v| g.scale_rows(v, vec![0.5, -1.0, 2.0]));
        check_unary(x.clone(), |g, v| g.mul(v, v));
        check_unary(x.clone(), |g, v| g.slice_cols(v, 1, 3));
        check_unary(x.clone(), |g, v| g.gather(v, vec![2, 0, 2, 1]));
        check_unary(x, |g, v| {
            let s = g.slice_cols(v, 0, 2);
            g.concat_cols(s, v)
        });
    }

    #[test]
    fn matmul_gradients_for_every_transpose() {
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { pseudo(4, 3, 2) } else { pseudo(3, 4, 2) };
            let b = if tb { pseudo(5, 4, 3) } else { pseudo(4, 5, 3) };
            let bc = b.clone();
            check_unary(a, move |g, v| {
                let bv = g.constant(bc.clone());
                g.matmul(v, ta, bv, tb)
            });
            let ac = if ta { pseudo(4, 3, 2) } else { pseudo(3, 4, 2) };
            check_unary(b, move |g, v| {
                let av = g.constant(ac.clone());
                g.matmul(av, ta, v, tb)
            });
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let x = pseudo(3, 6, 4);
        let gain = pseudo(1, 6, 5);
        let bias = pseudo(1, 6, 6);
        let (gc, bc) = (gain.clone(), bias.clone());
        check_unary(x.clone(), move |g, v| {
            let gv = g.constant(gc.clone());
            let bv = g.constant(bc.clone());
            g.layer_norm(v, gv, bv)
        });
        let xc = x.clone();
        check_unary(gain, move |g, v| {
            let xv = g.constant(xc.clone());
            let bv = g.constant(bias.clone());
            g.layer_norm(xv, v, bv)
        });
    }

    #[test]
    fn attention_gradients_with_padding() {
        let (seq, heads, d) = (4, 2, 4);
        let lengths = vec![4, 2, 1];
        let rows = lengths.len() * seq;
        let q = pseudo(rows, d, 7);
        let k = pseudo(rows, d, 8);
        let v = pseudo(rows, d, 9);
        for which in 0..3 {
            let (q, k, v, lengths) = (q.clone(), k.clone(), v.clone(), lengths.clone());
            let x = [&q, &k, &v][which].clone();
            check_unary(x, move |g, x| {
                let mut ins = [None, None, None];
                for (i, m) in [&q, &k, &v].iter().enumerate() {
                    ins[i] = Some(if i == which { x } else { g.constant((*m).clone()) });
                }
                g.attention(ins[0].unwrap(), ins[1].unwrap(), ins[2].unwrap(), seq, heads, lengths.clone())
            });
        }
    }

    #[test]
    fn softmax_ce_and_squared_norm_gradients() {
        let x = pseudo(3, 5, 10);
        check_unary(x.clone(), |g, v| g.softmax_cross_entropy(v, vec![0, 4, 2]));
        check_unary(x, |g, v| g.mean_row_squared_norm(v));
    }

    #[test]
    fn row_select_routes_gradient() {
        let mut g = Graph::new();
        let a = g.input(Matrix::filled(2, 2, 1.0));
        let b = g.input(Matrix::filled(2, 2, 2.0));
        let s = g.row_select(a, b, vec![true, false]);
        let loss = g.mean_row_squared_norm(s);
        let grads = g.backward(loss);
        assert_eq!(grads.wrt(a).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn shared_parameter_gradients_are_summed() {
        let mut g = Graph::new();
        let p1 = g.param(3, Matrix::scalar(2.0));
        let p2 = g.param(3, Matrix::scalar(2.0));
        let y = g.mul(p1, p2);
        let grads = g.backward(y);
        let params = grads.params();
        assert_eq!(params.len(), 1);
        assert_eq!(params[0].0, 3);
        assert_eq!(params[0].1.item(), 4.0);
    }
}
