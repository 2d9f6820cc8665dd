//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records primitive operations in creation order, which is a
//! topological order by construction. [`Tape::backward`] walks it once in
//! reverse, touching only nodes that depend on a trainable leaf.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous block of rows belonging to one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    LeakyRelu(NodeId, T),
    Silu(NodeId),
    /// Softmax along each row.
    SoftmaxRows(NodeId),
    /// Softmax down each column.
    SoftmaxCols(NodeId),
    /// Row-wise RMS normalisation with a `1×d` gain.
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<T>,
    },
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    /// Mean negative log-likelihood over `(row, class)` targets.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<(usize, usize)>,
        probs: Matrix<T>,
    },
    /// Multi-head causal self-attention inside each segment.
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<Segment>,
        /// Attention weights per (segment, head), each `len×len`.
        weights: Vec<Vec<T>>,
    },
    /// `Σ_t coeffs[row_t, column] · term_t`.
    WeightedSum {
        coeffs: NodeId,
        column: usize,
        terms: Vec<(usize, NodeId)>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Silu(..) => "silu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::SoftmaxCols(..) => "softmax_cols",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::CausalAttention { .. } => "causal_attention",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Matrix<T>,
    needs_grad: bool,
    trainable: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<NodeId, Matrix<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix<T>> {
        self.grads.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Matrix<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> T {
        self.grads
            .values()
            .flat_map(|m| m.as_slice().iter())
            .map(|x| *x * *x)
            .sum::<T>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`; earlier ids stay valid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.get(0, 0)
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> NodeId {
        let id = self.push(Op::Leaf, value, true);
        self.nodes[id.0].trainable = true;
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, ng))
    }

    /// `a · bᵀ`, the usual `x · Wᵀ` projection.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::MatMulNT(a, b), v, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::Hadamard(a, b), v, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).scale(c);
        let ng = self.ng(&[a]);
        self.push(Op::Scale(a, c), v, ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(Op::Sum(a), v, ng)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        let v = self
            .value(a)
            .map(|x| if x >= T::zero() { x } else { slope * x });
        let ng = self.ng(&[a]);
        self.push(Op::LeakyRelu(a, slope), v, ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        let ng = self.ng(&[a]);
        self.push(Op::Silu(a), v, ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut v = src.clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        let ng = self.ng(&[a]);
        self.push(Op::SoftmaxRows(a), v, ng)
    }

    pub fn softmax_cols(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).transpose();
        let mut v = t;
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        let v = v.transpose();
        let ng = self.ng(&[a]);
        self.push(Op::SoftmaxCols(a), v, ng)
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: T) -> Result<NodeId> {
        let xv = self.value(x);
        let gv = self.value(gain);
        if gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(Error::Dimension {
                op: "rms_norm",
                left: xv.shape(),
                right: gv.shape(),
            });
        }
        let d = T::lit(xv.cols() as f64);
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let ms = row.iter().map(|a| *a * *a).sum::<T>() / d;
            let r = T::one() / (ms + eps).sqrt();
            inv.push(r);
            for (o, g) in out.row_mut(i).iter_mut().zip(gv.as_slice()) {
                *o = *o * r * *g;
            }
        }
        let ng = self.ng(&[x, gain]);
        Ok(self.push(
            Op::RmsNorm {
                x,
                gain,
                inv_rms: inv,
            },
            out,
            ng,
        ))
    }

    /// Row lookup `table[indices[i]]`.
    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let tv = self.value(table);
        if let Some(bad) = indices.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::arg(format!(
                "gather index {bad} out of range for {} rows",
                tv.rows()
            )));
        }
        let mut out = Matrix::zeros(indices.len(), tv.cols());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        let ng = self.ng(&[table]);
        Ok(self.push(Op::Gather { table, indices }, out, ng))
    }

    /// Mean cross-entropy over the listed `(row, class)` pairs; other rows are ignored.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<(usize, usize)>) -> Result<NodeId> {
        let lv = self.value(logits);
        if targets.is_empty() {
            return Err(Error::arg("cross entropy needs at least one target"));
        }
        for &(r, c) in &targets {
            if r >= lv.rows() || c >= lv.cols() {
                return Err(Error::arg(format!(
                    "target ({r}, {c}) outside logits {:?}",
                    lv.shape()
                )));
            }
        }
        let mut probs = Matrix::zeros(targets.len(), lv.cols());
        let mut total = T::zero();
        for (t, &(r, c)) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|x| (*x - max).exp()).sum::<T>().ln();
            total += lse - row[c];
            for (p, x) in probs.row_mut(t).iter_mut().zip(row) {
                *p = (*x - lse).exp();
            }
        }
        let n = T::lit(targets.len() as f64);
        let v = Matrix::filled(1, 1, total / n);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            v,
            ng,
        ))
    }

    /// Causal multi-head attention; `q`, `k`, `v` are `rows×d` with heads laid
    /// out as contiguous column blocks.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<Segment>,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::Dimension {
                op: "causal_attention",
                left: qv.shape(),
                right: kv.shape(),
            });
        }
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::arg(format!("{d} columns not divisible into {heads} heads")));
        }
        let hd = d / heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut out = Matrix::zeros(qv.rows(), d);
        let mut weights = Vec::with_capacity(segments.len() * heads);
        for seg in &segments {
            if seg.start + seg.len > qv.rows() {
                return Err(Error::arg("attention segment exceeds row count"));
            }
            for h in 0..heads {
                let c0 = h * hd;
                let mut w = vec![T::zero(); seg.len * seg.len];
                for i in 0..seg.len {
                    let qi = &qv.row(seg.start + i)[c0..c0 + hd];
                    let row = &mut w[i * seg.len..(i + 1) * seg.len];
                    for j in 0..=i {
                        let kj = &kv.row(seg.start + j)[c0..c0 + hd];
                        row[j] = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum::<T>() * scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                    let orow = &mut out.row_mut(seg.start + i)[c0..c0 + hd];
                    for j in 0..=i {
                        let p = row[j];
                        let vj = &vv.row(seg.start + j)[c0..c0 + hd];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * *x;
                        }
                    }
                }
                weights.push(w);
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments,
                weights,
            },
            out,
            ng,
        ))
    }

    /// `Σ_t coeffs[row_t, column] · term_t`; every term must share one shape.
    pub fn weighted_sum(
        &mut self,
        coeffs: NodeId,
        column: usize,
        terms: Vec<(usize, NodeId)>,
        shape: (usize, usize),
    ) -> Result<NodeId> {
        let cv = self.value(coeffs);
        if column >= cv.cols() {
            return Err(Error::arg("weighted sum column out of range"));
        }
        let mut out = Matrix::zeros(shape.0, shape.1);
        for &(row, term) in &terms {
            if row >= cv.rows() {
                return Err(Error::arg("weighted sum row out of range"));
            }
            let c = cv.get(row, column);
            out.axpy(c, self.value(term))?;
        }
        let mut deps: Vec<NodeId> = terms.iter().map(|t| t.1).collect();
        deps.push(coeffs);
        let ng = self.ng(&deps);
        Ok(self.push(
            Op::WeightedSum {
                coeffs,
                column,
                terms,
            },
            out,
            ng,
        ))
    }

    /// Gradient of scalar node `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 loss, node {} is {:?}",
                loss.0,
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at node {idx} ({})",
                    node.op.name()
                )));
            }
            self.propagate(idx, &g, &mut grads)?;
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.trainable {
                continue;
            }
            let g = grads
                .get_mut(idx)
                .and_then(Option::take)
                .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at leaf {idx}")));
            }
            out.insert(NodeId(idx), g);
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let d = x.zip_with("leaky_relu", g, |xi, gi| {
                    if xi >= T::zero() {
                        gi
                    } else {
                        *slope * gi
                    }
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = x.zip_with("silu", g, |xi, gi| {
                    let s = T::one() / (T::one() + (-xi).exp());
                    gi * s * (T::one() + xi * (T::one() - s))
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    softmax_backward(y.row(i), g.row(i), d.row_mut(i));
                }
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxCols(a) => {
                let yt = node.value.transpose();
                let gt = g.transpose();
                let mut d = Matrix::zeros(yt.rows(), yt.cols());
                for i in 0..yt.rows() {
                    softmax_backward(yt.row(i), gt.row(i), d.row_mut(i));
                }
                self.accumulate(grads, *a, d.transpose());
            }
            Op::RmsNorm {
                x, gain, inv_rms, ..
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let dcols = xv.cols();
                let dn = T::lit(dcols as f64);
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(xv.rows(), dcols);
                    for i in 0..xv.rows() {
                        let r = inv_rms[i];
                        let xr = xv.row(i);
                        let gr = g.row(i);
                        let dot: T = (0..dcols).map(|j| gv.get(0, j) * gr[j] * xr[j]).sum();
                        let coef = r * r * r * dot / dn;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = r * gv.get(0, j) * gr[j] - coef * xr[j];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gain) {
                    let mut dg = Matrix::zeros(1, dcols);
                    for i in 0..xv.rows() {
                        let r = inv_rms[i];
                        for ((o, xi), gi) in dg.row_mut(0).iter_mut().zip(xv.row(i)).zip(g.row(i)) {
                            *o += *gi * *xi * r;
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
            }
            Op::Gather { table, indices } => {
                let tv = self.value(*table);
                let mut d = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += *x;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let scale = g.get(0, 0) / T::lit(targets.len() as f64);
                let mut d = Matrix::zeros(lv.rows(), lv.cols());
                for (t, &(r, c)) in targets.iter().enumerate() {
                    for (o, p) in d.row_mut(r).iter_mut().zip(probs.row(t)) {
                        *o += *p * scale;
                    }
                    let cur = d.get(r, c);
                    d.set(r, c, cur - scale);
                }
                self.accumulate(grads, *logits, d);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let hd = d / heads;
                let scale = T::one() / T::lit(hd as f64).sqrt();
                let mut dq = Matrix::zeros(qv.rows(), d);
                let mut dk = Matrix::zeros(qv.rows(), d);
                let mut dv = Matrix::zeros(qv.rows(), d);
                let mut wi = 0;
                for seg in segments {
                    let n = seg.len;
                    for h in 0..*heads {
                        let c0 = h * hd;
                        let w = &weights[wi];
                        wi += 1;
                        let mut ds = vec![T::zero(); n * n];
                        for i in 0..n {
                            let gi = &g.row(seg.start + i)[c0..c0 + hd];
                            // dP_ij = g_i · v_j, dV_j += P_ij g_i
                            let mut dp = vec![T::zero(); i + 1];
                            for j in 0..=i {
                                let vj = &vv.row(seg.start + j)[c0..c0 + hd];
                                dp[j] = gi.iter().zip(vj).map(|(a, b)| *a * *b).sum();
                                let p = w[i * n + j];
                                for (o, x) in dv.row_mut(seg.start + j)[c0..c0 + hd].iter_mut().zip(gi) {
                                    *o += p * *x;
                                }
                            }
                            let inner: T = (0..=i).map(|j| dp[j] * w[i * n + j]).sum();
                            for j in 0..=i {
                                ds[i * n + j] = w[i * n + j] * (dp[j] - inner) * scale;
                            }
                        }
                        for i in 0..n {
                            for j in 0..=i {
                                let s = ds[i * n + j];
                                if s == T::zero() {
                                    continue;
                                }
                                let kj: Vec<T> = kv.row(seg.start + j)[c0..c0 + hd].to_vec();
                                let qi: Vec<T> = qv.row(seg.start + i)[c0..c0 + hd].to_vec();
                                for (o, x) in dq.row_mut(seg.start + i)[c0..c0 + hd].iter_mut().zip(&kj) {
                                    *o += s * *x;
                                }
                                for (o, x) in dk.row_mut(seg.start + j)[c0..c0 + hd].iter_mut().zip(&qi) {
                                    *o += s * *x;
                                }
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    self.accumulate(grads, *q, dq);
                }
                if self.wants(*k) {
                    self.accumulate(grads, *k, dk);
                }
                if self.wants(*v) {
                    self.accumulate(grads, *v, dv);
                }
            }
            Op::WeightedSum {
                coeffs,
                column,
                terms,
            } => {
                let cv = self.value(*coeffs);
                if self.wants(*coeffs) {
                    let mut dc = Matrix::zeros(cv.rows(), cv.cols());
                    for &(row, term) in terms {
                        let cur = dc.get(row, *column);
                        dc.set(row, *column, cur + g.dot(self.value(term))?);
                    }
                    self.accumulate(grads, *coeffs, dc);
                }
                for &(row, term) in terms {
                    if self.wants(term) {
                        self.accumulate(grads, term, g.scale(cv.get(row, *column)));
                    }
                }
            }
        }
        Ok(())
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward<T: Scalar>(y: &[T], g: &[T], out: &mut [T]) {
    let inner: T = y.iter().zip(g).map(|(a, b)| *a * *b).sum();
    for ((o, yi), gi) in out.iter_mut().zip(y).zip(g) {
        *o = *yi * (*gi - inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Central differences of `f` around `x0`, entry by entry.
    fn numeric_grad(x0: &Matrix<f64>, f: impl Fn(&Matrix<f64>) -> f64) -> Matrix<f64> {
        let h = 1e-5;
        Matrix::from_fn(x0.rows(), x0.cols(), |i, j| {
            let mut p = x0.clone();
            p.set(i, j, x0.get(i, j) + h);
            let mut n = x0.clone();
            n.set(i, j, x0.get(i, j) - h);
            (f(&p) - f(&n)) / (2.0 * h)
        })
    }

    fn assert_close(a: &Matrix<f64>, b: &Matrix<f64>, tol: f64) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!((x - y).abs() / denom < tol || (x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut t = Tape::new();
        let p = t.param(m(&[&[1.0, 2.0]]));
        let c = t.constant(m(&[&[5.0]]));
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(p).unwrap(), &Matrix::zeros(1, 2));
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.param(m(&[&[3.0]]));
        let sq = t.hadamard(x, x).unwrap();
        let g = t.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut t = Tape::new();
        let x = t.param(m(&[&[3.0, 1.0]]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_is_reported_with_node() {
        let mut t = Tape::new();
        let x = t.param(m(&[&[f64::NAN]]));
        let sq = t.hadamard(x, x).unwrap();
        let y = t.sum(sq);
        match t.backward(y) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("leaf")),
            other => panic!("{other:?}"),
        }
        let mut t = Tape::new();
        let x = t.param(m(&[&[1.0]]));
        let inf = t.constant(m(&[&[f64::INFINITY]]));
        let y = t.hadamard(x, inf).unwrap();
        let z = t.hadamard(y, y).unwrap();
        let s = t.sum(z);
        assert!(matches!(t.backward(s), Err(Error::Numeric(_))));
    }

    fn check_unary(build: impl Fn(&mut Tape<f64>, NodeId) -> NodeId, x0: Matrix<f64>) {
        let eval = |x: &Matrix<f64>| {
            let mut t = Tape::new();
            let id = t.constant(x.clone());
            let y = build(&mut t, id);
            let w = t.constant(Matrix::from_fn(t.value(y).rows(), t.value(y).cols(), |i, j| {
                0.3 + 0.1 * i as f64 - 0.2 * j as f64
            }));
            let p = t.hadamard(y, w).unwrap();
            let s = t.sum(p);
            t.scalar(s)
        };
        let mut t = Tape::new();
        let id = t.param(x0.clone());
        let y = build(&mut t, id);
        let w = t.constant(Matrix::from_fn(t.value(y).rows(), t.value(y).cols(), |i, j| {
            0.3 + 0.1 * i as f64 - 0.2 * j as f64
        }));
        let p = t.hadamard(y, w).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_close(g.get(id).unwrap(), &numeric_grad(&x0, eval), 1e-6);
    }

    #[test]
    fn elementwise_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Matrix::<f64>::randn(3, 4, 1.0, &mut rng);
        check_unary(|t, x| t.silu(x), x0.clone());
        check_unary(|t, x| t.leaky_relu(x, 0.01), x0.clone());
        check_unary(|t, x| t.softmax_rows(x), x0.clone());
        check_unary(|t, x| t.softmax_cols(x), x0.clone());
        check_unary(|t, x| t.scale(x, -1.5), x0.clone());
        check_unary(
            |t, x| {
                let g = t.constant(m(&[&[1.0, 0.5, -2.0, 1.5]]));
                t.rms_norm(x, g, 1e-6).unwrap()
            },
            x0.clone(),
        );
        check_unary(|t, x| t.gather(x, vec![2, 0, 2]).unwrap(), x0);
    }

    #[test]
    fn attention_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q0 = Matrix::<f64>::randn(5, 4, 1.0, &mut rng);
        let k0 = Matrix::<f64>::randn(5, 4, 1.0, &mut rng);
        let v0 = Matrix::<f64>::randn(5, 4, 1.0, &mut rng);
        let segs = vec![Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
        let run = |q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>, train: usize| {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = [q, k, v]
                .iter()
                .enumerate()
                .map(|(i, m)| if i == train { t.param((*m).clone()) } else { t.constant((*m).clone()) })
                .collect();
            let a = t.causal_attention(ids[0], ids[1], ids[2], 2, segs.clone()).unwrap();
            let loss = t.cross_entropy(a, vec![(1, 2), (2, 0), (4, 3)]).unwrap();
            let val = t.scalar(loss);
            let g = t.backward(loss).unwrap();
            (val, g.get(ids[train]).unwrap().clone())
        };
        for train in 0..3 {
            let mats = [&q0, &k0, &v0];
            let (_, analytic) = run(&q0, &k0, &v0, train);
            let numeric = numeric_grad(mats[train], |x| {
                let mut ms = [q0.clone(), k0.clone(), v0.clone()];
                ms[train] = x.clone();
                run(&ms[0], &ms[1], &ms[2], train).0
            });
            assert_close(&analytic, &numeric, 1e-6);
        }
    }

    #[test]
    fn matmul_and_weighted_sum_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a0 = Matrix::<f64>::randn(3, 2, 1.0, &mut rng);
        let b0 = Matrix::<f64>::randn(4, 2, 1.0, &mut rng);
        let c0 = Matrix::<f64>::randn(2, 3, 1.0, &mut rng);
        let d1 = Matrix::<f64>::randn(3, 4, 1.0, &mut rng);
        let loss_of = |a: &Matrix<f64>, c: &Matrix<f64>| {
            let mut t = Tape::new();
            let ai = t.param(a.clone());
            let bi = t.constant(b0.clone());
            let ci = t.param(c.clone());
            let ab = t.matmul_nt(ai, bi).unwrap();
            let di = t.constant(d1.clone());
            let ws = t.weighted_sum(ci, 1, vec![(0, ab), (1, di)], (3, 4)).unwrap();
            let sq = t.hadamard(ws, ws).unwrap();
            let s = t.sum(sq);
            let g = t.backward(s).unwrap();
            (t.scalar(s), g.get(ai).unwrap().clone(), g.get(ci).unwrap().clone())
        };
        let (_, ga, gc) = loss_of(&a0, &c0);
        assert_close(&ga, &numeric_grad(&a0, |x| loss_of(x, &c0).0), 1e-6);
        assert_close(&gc, &numeric_grad(&c0, |x| loss_of(&a0, x).0), 1e-6);
        // untouched columns of the coefficient table get exact zeros
        assert_eq!(gc.get(0, 0), 0.0);
        assert_eq!(gc.get(1, 2), 0.0);
    }

    #[test]
    fn masked_rows_do_not_affect_cross_entropy() {
        let mut t = Tape::new();
        let l = t.constant(m(&[&[1.0, 2.0, 3.0], &[0.5, 0.1, -1.0]]));
        let loss = t.cross_entropy(l, vec![(1, 0)]).unwrap();
        let mut t2 = Tape::new();
        let l2 = t2.constant(m(&[&[100.0, -7.0, 3.0], &[0.5, 0.1, -1.0]]));
        let loss2 = t2.cross_entropy(l2, vec![(1, 0)]).unwrap();
        assert_eq!(t.scalar(loss), t2.scalar(loss2));
    }
}
