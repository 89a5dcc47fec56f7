use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Result, XbmError};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gather { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    Gelu(Var),
    Tanh(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    SelectRows { x: Var, rows: Vec<usize> },
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    Attention(Box<AttentionRecord>),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
    /// `[batch, heads, n, m]`, zero on masked entries.
    weights: Vec<f64>,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gather { .. } => "embedding-gather",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log-softmax",
            Op::LayerNorm { .. } => "layer-norm",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::SelectRows { .. } => "select-rows",
            Op::MeanAxis { .. } => "mean-axis",
            Op::Sum(_) => "sum",
            Op::L2Normalize { .. } => "l2-normalize",
            Op::Attention(_) => "attention",
            Op::CrossEntropy { .. } => "cross-entropy",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Gelu(x)
            | Op::Tanh(x)
            | Op::Reshape(x)
            | Op::Sum(x) => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Slice { x, .. }
            | Op::SelectRows { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::L2Normalize { x, .. } => vec![*x],
            Op::Attention(r) => vec![r.q, r.k, r.v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation tape. Nodes are appended in evaluation order, so a
/// node's parents always have smaller ids and a reverse sweep is a valid
/// topological order.
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<(u64, usize), Var>,
    grads: Option<Vec<Option<Tensor>>>,
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
            param_nodes: HashMap::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(XbmError::Numeric { op: op.name() });
        }
        if self.grads.is_some() {
            return Err(XbmError::Graph("cannot record after backward".into()));
        }
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(XbmError::Numeric { op: "leaf" });
        }
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Ok(id)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false)
    }

    /// Differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Leaf for a stored parameter. Each parameter is loaded at most once
    /// per graph; frozen stores produce constant leaves.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.param_nodes.get(&key) {
            return Ok(v);
        }
        let v = self.push_leaf(store.value(id).clone(), !store.is_frozen())?;
        self.param_nodes.insert(key, v);
        Ok(v)
    }

    pub(crate) fn param_var(&self, store_uid: u64, id: usize) -> Option<Var> {
        self.param_nodes.get(&(store_uid, id)).copied()
    }

    // ---------------------------------------------------------------------
    // forward operators

    /// `a[..., n, k] x b[k, m] -> [..., n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(XbmError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let m = sb[1];
        let n = self.value(a).numel() / k;
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let mut shape = sa;
        *shape.last_mut().unwrap() = m;
        self.push(Op::MatMul(a, b), Tensor::from_parts(shape, out))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(XbmError::shape("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_last(self.value(x).data(), r, c);
        let mut shape = s;
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        self.push(Op::Transpose(x), Tensor::from_parts(shape, out))
    }

    /// Elementwise sum; `b` may also match only the trailing axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(bv.len()) {
            for (o, y) in chunk.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let shape = av.shape().to_vec();
        self.push(Op::Add(a, b), Tensor::from_parts(shape, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(bv.len()) {
            for (o, y) in chunk.iter_mut().zip(bv) {
                *o *= y;
            }
        }
        let shape = av.shape().to_vec();
        self.push(Op::Mul(a, b), Tensor::from_parts(shape, out))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.scale_inplace(s);
        self.push(Op::Scale(x, s), t)
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !ok {
            return Err(XbmError::shape(op, format!("{sa:?} with {sb:?}")));
        }
        Ok(())
    }

    /// Rows of `table[V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(XbmError::shape("embedding-gather", format!("{s:?}")));
        }
        let (vocab, d) = (s[0], s[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(XbmError::shape(
                    "embedding-gather",
                    format!("id {id} outside table of {vocab} rows"),
                ));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            Tensor::from_parts(vec![ids.len(), d], out),
        )
    }

    /// Softmax over the last axis (row max subtracted first).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let w = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            softmax_inplace(row);
        }
        let shape = t.shape().to_vec();
        self.push(Op::Softmax(x), Tensor::from_parts(shape, out))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let w = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Op::LogSoftmax(x), Tensor::from_parts(shape, out))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(XbmError::shape(
                "layer-norm",
                format!(
                    "{:?} with gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let t = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = t.data().to_vec();
        let mut stats = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[i] + b[i];
            }
            stats.push((mean, rstd));
        }
        let shape = t.shape().to_vec();
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            Tensor::from_parts(shape, out),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| gelu(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Gelu(x), Tensor::from_parts(shape, out))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v.tanh()).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Tanh(x), Tensor::from_parts(shape, out))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| XbmError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(XbmError::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rank = s.len() == base.len();
            if !same_rank || (0..s.len()).any(|i| i != axis && s[i] != base[i]) {
                return Err(XbmError::shape("concat", format!("{base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Tensor::from_parts(shape, out),
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(XbmError::shape(
                "slice",
                format!("{s:?} axis {axis} [{start}, {})", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Op::Slice { x, axis, start }, Tensor::from_parts(shape, out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), t)
    }

    /// Index along axis 0.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(XbmError::shape("select-rows", format!("{s:?} rows {rows:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        self.push(
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            Tensor::from_parts(shape, out),
        )
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return Err(XbmError::shape("mean-axis", format!("{s:?} axis {axis}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let mut shape = s;
        shape.remove(axis);
        self.push(Op::MeanAxis { x, axis }, Tensor::from_parts(shape, out))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Unit-normalize along the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let w = t.last_dim();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(w) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let shape = t.shape().to_vec();
        self.push(Op::L2Normalize { x, norms }, Tensor::from_parts(shape, out))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [B, n, d]`, `k, v: [B, m, d]`. With `causal`, query `i` sees keys
    /// `j <= i + (m - n)`, so a single trailing query attends to a whole
    /// cached prefix. The normalized weights stay readable through
    /// [`Graph::attention_weights`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        let bad = sq.len() != 3
            || sk.len() != 3
            || sk != sv
            || sq[0] != sk[0]
            || sq[2] != sk[2]
            || heads == 0
            || sq[2] % heads != 0
            || (causal && sq[1] > sk[1]);
        if bad {
            return Err(XbmError::shape(
                "attention",
                format!("q {sq:?}, k {sk:?}, v {sv:?}, heads {heads}"),
            ));
        }
        let (b, n, d, m) = (sq[0], sq[1], sq[2], sk[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut weights = vec![0.0; b * heads * n * m];
        let mut out = vec![0.0; b * n * d];
        let offset = m - n.min(m);
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..n {
                    let visible = if causal { i + offset + 1 } else { m };
                    let qrow = &qd[(bi * n + i) * d + h * dh..][..dh];
                    let wrow = &mut weights[((bi * heads + h) * n + i) * m..][..m];
                    for j in 0..visible {
                        let krow = &kd[(bi * m + j) * d + h * dh..][..dh];
                        wrow[j] = dot(qrow, krow) * scale;
                    }
                    softmax_inplace(&mut wrow[..visible]);
                    let orow = &mut out[(bi * n + i) * d + h * dh..][..dh];
                    for j in 0..visible {
                        let w = wrow[j];
                        let vrow = &vd[(bi * m + j) * d + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        self.push(
            Op::Attention(Box::new(AttentionRecord {
                q,
                k,
                v,
                heads,
                causal,
                weights,
            })),
            Tensor::from_parts(vec![b, n, d], out),
        )
    }

    /// Attention weights `[B, heads, n, m]` recorded by an attention node.
    pub fn attention_weights(&self, att: Var) -> Result<Tensor> {
        match &self.nodes[att.0].op {
            Op::Attention(r) => {
                let sq = self.shape(r.q);
                let sk = self.shape(r.k);
                Ok(Tensor::from_parts(
                    vec![sq[0], r.heads, sq[1], sk[1]],
                    r.weights.clone(),
                ))
            }
            other => Err(XbmError::Graph(format!(
                "node {} is {}, not attention",
                att.0,
                other.name()
            ))),
        }
    }

    /// Weighted cross-entropy `sum_i w_i * -log softmax(logits_i)[t_i]` over
    /// the rows of `logits`. Zero weights mask rows out.
    pub fn cross_entropy_weighted(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        let c = t.last_dim();
        let rows = t.rows();
        if t.ndim() < 1 || targets.len() != rows || weights.len() != rows {
            return Err(XbmError::shape(
                "cross-entropy",
                format!(
                    "logits {:?}, {} targets, {} weights",
                    t.shape(),
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(XbmError::shape(
                "cross-entropy",
                format!("target {bad} outside {c} classes"),
            ));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            loss += weights[r] * (lse - row[targets[r]]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// Mean cross-entropy over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = targets.len().max(1);
        let w = vec![1.0 / n as f64; targets.len()];
        self.cross_entropy_weighted(logits, targets, &w)
    }

    // ---------------------------------------------------------------------
    // reverse sweep

    /// Reverse-mode sweep from a scalar node. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(XbmError::Graph("graph already consumed by backward".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(XbmError::Graph(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn is_consumed(&self) -> bool {
        self.grads.is_some()
    }

    /// Gradient of the last backward's loss w.r.t. `v` (`None` if `v` was
    /// not on a differentiable path).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    fn backprop_node(&self, id: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, m) = (sb[0], sb[1]);
                let n = self.value(*a).numel() / k;
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; n * k];
                    matmul_bt_into(g, self.value(*b).data(), &mut ga, n, m, k);
                    accumulate(grads, *a, self.shape(*a), ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * m];
                    matmul_at_into(self.value(*a).data(), g, &mut gb, n, k, m);
                    accumulate(grads, *b, sb, gb);
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let gx = transpose_last(g, r, c);
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, self.shape(*a), g.to_vec());
                }
                if self.requires_grad(*b) {
                    let nb = self.value(*b).numel();
                    let mut gb = vec![0.0; nb];
                    for chunk in g.chunks(nb) {
                        for (o, x) in gb.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    accumulate(grads, *b, self.shape(*b), gb);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                if self.requires_grad(*a) {
                    let ga = g
                        .chunks(nb)
                        .flat_map(|chunk| chunk.iter().zip(bv).map(|(x, y)| x * y))
                        .collect();
                    accumulate(grads, *a, self.shape(*a), ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; nb];
                    for (gc, ac) in g.chunks(nb).zip(av.chunks(nb)) {
                        for ((o, x), y) in gb.iter_mut().zip(gc).zip(ac) {
                            *o += x * y;
                        }
                    }
                    accumulate(grads, *b, self.shape(*b), gb);
                }
            }
            Op::Scale(x, s) => {
                let gx = g.iter().map(|v| v * s).collect();
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::Gather { table, ids } => {
                if self.requires_grad(*table) {
                    let s = self.shape(*table);
                    let d = s[1];
                    let mut gt = vec![0.0; s[0] * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, x) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += x;
                        }
                    }
                    accumulate(grads, *table, s, gt);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), or) in y.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                    let dotp = dot(yr, gr);
                    for i in 0..w {
                        or[i] = yr[i] * (gr[i] - dotp);
                    }
                }
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), or) in y.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                    let gsum: f64 = gr.iter().sum();
                    for i in 0..w {
                        or[i] = gr[i] - yr[i].exp() * gsum;
                    }
                }
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xv = self.value(*x).data();
                let gm = self.value(*gamma).data();
                let d = gm.len();
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for i in 0..d {
                        xhat[i] = (xr[i] - mean) * rstd;
                        dxhat[i] = gr[i] * gm[i];
                        gg[i] += gr[i] * xhat[i];
                        gb[i] += gr[i];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dot(&dxhat, &xhat) / d as f64;
                    for i in 0..d {
                        gx[r * d + i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                if self.requires_grad(*x) {
                    accumulate(grads, *x, self.shape(*x), gx);
                }
                if self.requires_grad(*gamma) {
                    accumulate(grads, *gamma, &[d], gg);
                }
                if self.requires_grad(*beta) {
                    accumulate(grads, *beta, &[d], gb);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = xv.iter().zip(g).map(|(&v, &gv)| gv * gelu_grad(v)).collect();
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let gx = y.iter().zip(g).map(|(yv, gv)| gv * (1.0 - yv * yv)).collect();
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::Concat { parts, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let ps = self.shape(*p);
                    let chunk = ps[*axis] * inner;
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * s[*axis] * inner + offset;
                            gp.extend_from_slice(&g[base..base + chunk]);
                        }
                        accumulate(grads, *p, ps, gp);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x);
                let len = node.value.shape()[*axis];
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * sx[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(grads, *x, sx, gx);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, self.shape(*x), g.to_vec());
            }
            Op::SelectRows { x, rows } => {
                let sx = self.shape(*x);
                let inner: usize = sx[1..].iter().product();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in gx[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(&g[i * inner..(i + 1) * inner])
                    {
                        *o += v;
                    }
                }
                accumulate(grads, *x, sx, gx);
            }
            Op::MeanAxis { x, axis } => {
                let sx = self.shape(*x);
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let n = sx[*axis];
                let mut gx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    for a in 0..n {
                        let base = (o * n + a) * inner;
                        for i in 0..inner {
                            gx[base + i] = g[o * inner + i] / n as f64;
                        }
                    }
                }
                accumulate(grads, *x, sx, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, self.shape(*x), vec![g[0]; n]);
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let mut gx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    let proj = dot(yr, gr);
                    for i in 0..w {
                        gx[r * w + i] = (gr[i] - yr[i] * proj) / norm;
                    }
                }
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::Attention(rec) => self.backprop_attention(rec, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let mut gx = probs.clone();
                for (r, row) in gx.chunks_mut(c).enumerate() {
                    row[targets[r]] -= 1.0;
                    let w = weights[r] * g[0];
                    for v in row.iter_mut() {
                        *v *= w;
                    }
                }
                accumulate(grads, *logits, self.shape(*logits), gx);
            }
        }
        Ok(())
    }

    fn backprop_attention(&self, rec: &AttentionRecord, g: &[f64], grads: &mut [Option<Tensor>]) {
        let sq = self.shape(rec.q);
        let sk = self.shape(rec.k);
        let (b, n, d, m) = (sq[0], sq[1], sq[2], sk[1]);
        let heads = rec.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(rec.q).data(),
            self.value(rec.k).data(),
            self.value(rec.v).data(),
        );
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dw = vec![0.0; m];
        let offset = m - n.min(m);
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..n {
                    let visible = if rec.causal { i + offset + 1 } else { m };
                    let wrow = &rec.weights[((bi * heads + h) * n + i) * m..][..m];
                    let grow = &g[(bi * n + i) * d + h * dh..][..dh];
                    let mut acc = 0.0;
                    for j in 0..visible {
                        let voff = (bi * m + j) * d + h * dh;
                        dw[j] = dot(grow, &vd[voff..voff + dh]);
                        acc += wrow[j] * dw[j];
                        for (o, x) in gv[voff..voff + dh].iter_mut().zip(grow) {
                            *o += wrow[j] * x;
                        }
                    }
                    let qoff = (bi * n + i) * d + h * dh;
                    for j in 0..visible {
                        let ds = wrow[j] * (dw[j] - acc) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let koff = (bi * m + j) * d + h * dh;
                        for t in 0..dh {
                            gq[qoff + t] += ds * kd[koff + t];
                            gk[koff + t] += ds * qd[qoff + t];
                        }
                    }
                }
            }
        }
        if self.requires_grad(rec.q) {
            accumulate(grads, rec.q, sq, gq);
        }
        if self.requires_grad(rec.k) {
            accumulate(grads, rec.k, sk, gk);
        }
        if self.requires_grad(rec.v) {
            accumulate(grads, rec.v, sk, gv);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), data)),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn transpose_last(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for (blk_in, blk_out) in src.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                blk_out[j * r + i] = blk_in[i * c + j];
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
