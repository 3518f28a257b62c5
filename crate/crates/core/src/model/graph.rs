//! Reverse-mode tape over 2-D matrices.

use std::sync::Arc;

use super::tensor::{matmul, matmul_into, Float, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

pub(crate) const RMS_EPS: f64 = 1e-6;

enum Op<F> {
    Leaf,
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Add(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv: Vec<F>,
    },
    Gelu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        keys: Arc<Vec<Vec<u32>>>,
        /// Softmax weights, per head, flattened in key-list order.
        probs: Vec<F>,
    },
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<F>,
        softmax: Matrix<F>,
    },
    Scale(NodeId, F),
    SumSquares(NodeId),
}

struct Node<F> {
    value: Matrix<F>,
    op: Op<F>,
}

/// Computation tape. Nodes are appended in evaluation order, so a reverse
/// sweep visits every consumer before its inputs.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix<F> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Matrix<F>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= t.rows) {
            return Err(Error::Shape(format!("row {bad} outside table of {}", t.rows)));
        }
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if (x.rows, x.cols) != (y.rows, y.cols) {
            return Err(Error::Shape(format!("add {x:?} and {y:?}")));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols != y.rows {
            return Err(Error::Shape(format!("matmul {x:?} by {y:?}")));
        }
        let out = matmul(x, false, y, false);
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    /// Row-wise RMS normalization with a learned per-column gain (`1×d`).
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (xv, g) = (self.value(x), self.value(gain));
        if g.rows != 1 || g.cols != xv.cols {
            return Err(Error::Shape(format!("gain {g:?} for input {xv:?}")));
        }
        let d = F::of(xv.cols as f64);
        let eps = F::of(RMS_EPS);
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        let mut inv = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let ms = row.iter().fold(F::zero(), |a, v| a + *v * *v) / d;
            let s = F::one() / (ms + eps).sqrt();
            inv.push(s);
            for ((o, v), gg) in out.row_mut(r).iter_mut().zip(row).zip(&g.data) {
                *o = *v * s * *gg;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu(x))
    }

    /// Multi-head scaled dot-product attention. Query row `i` attends only
    /// to the keys listed in `keys[i]`; every other key is skipped outright.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, keys: Arc<Vec<Vec<u32>>>) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.rows, qv.cols);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{d} columns over {heads} heads")));
        }
        if (kv.rows, kv.cols) != (n, d) || (vv.rows, vv.cols) != (n, d) || keys.len() != n {
            return Err(Error::Shape("attention operands disagree".into()));
        }
        if keys.iter().flatten().any(|&j| j as usize >= n) {
            return Err(Error::Shape("attention key out of range".into()));
        }
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let total: usize = keys.iter().map(Vec::len).sum();
        let mut probs = Vec::with_capacity(total * heads);
        let mut out = Matrix::zeros(n, d);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for (i, ks) in keys.iter().enumerate() {
                if ks.is_empty() {
                    continue;
                }
                let qi = &qv.row(i)[cols.clone()];
                let start = probs.len();
                let mut max = F::neg_infinity();
                for &j in ks {
                    let kj = &kv.row(j as usize)[cols.clone()];
                    let s = dot(qi, kj) * scale;
                    max = max.max(s);
                    probs.push(s);
                }
                let mut sum = F::zero();
                for p in &mut probs[start..] {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                let oi = &mut out.row_mut(i)[cols.clone()];
                for (p, &j) in probs[start..].iter_mut().zip(ks) {
                    *p = *p / sum;
                    let vj = &vv.row(j as usize)[cols.clone()];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += *p * *x;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                keys,
                probs,
            },
        ))
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if let Some(bad) = rows.iter().find(|&&r| r >= xv.rows) {
            return Err(Error::Shape(format!("row {bad} of {xv:?}")));
        }
        let mut out = Matrix::zeros(rows.len(), xv.cols);
        for (o, &r) in rows.iter().enumerate() {
            out.row_mut(o).copy_from_slice(xv.row(r));
        }
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }))
    }

    /// `Σ_r weights[r] · (−log softmax(logits[r])[targets[r]])` as a `1×1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[F]) -> Result<NodeId> {
        let z = self.value(logits);
        if targets.len() != z.rows || weights.len() != z.rows {
            return Err(Error::Shape(format!(
                "{} targets and {} weights for {z:?}",
                targets.len(),
                weights.len()
            )));
        }
        if targets.iter().any(|&t| t >= z.cols) {
            return Err(Error::Shape("target outside vocabulary".into()));
        }
        let mut softmax = Matrix::zeros(z.rows, z.cols);
        let mut loss = F::zero();
        for r in 0..z.rows {
            let row = z.row(r);
            let max = row.iter().fold(F::neg_infinity(), |a, b| a.max(*b));
            let mut sum = F::zero();
            for (s, x) in softmax.row_mut(r).iter_mut().zip(row) {
                *s = (*x - max).exp();
                sum += *s;
            }
            for s in softmax.row_mut(r) {
                *s = *s / sum;
            }
            let nll = sum.ln() + max - row[targets[r]];
            loss += weights[r] * nll;
        }
        let value = Matrix::from_vec(1, 1, vec![loss])?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                softmax,
            },
        ))
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v *= s;
        }
        self.push(out, Op::Scale(x, s))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum_squares();
        self.push(Matrix { rows: 1, cols: 1, data: vec![s] }, Op::SumSquares(x))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Option<Matrix<F>>>> {
        let r = self.value(root);
        if (r.rows, r.cols) != (1, 1) {
            return Err(Error::Shape(format!("backward from non-scalar {r:?}")));
        }
        let mut grads: Vec<Option<Matrix<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![F::one()])?);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            // Leaves keep their gradient; interior gradients are consumed.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped"),
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let dt = slot(&mut grads, *table, t.rows, t.cols);
                    for (r, &i) in ids.iter().enumerate() {
                        for (a, b) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *a += *b;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = slot(&mut grads, *a, av.rows, av.cols);
                    matmul_into(&g, false, bv, true, F::one(), da);
                    let db = slot(&mut grads, *b, bv.rows, bv.cols);
                    matmul_into(av, true, &g, false, F::one(), db);
                }
                Op::RmsNorm { x, gain, inv } => {
                    let (xv, gv) = (self.value(*x), self.value(*gain));
                    let d = F::of(xv.cols as f64);
                    let mut dgain = vec![F::zero(); xv.cols];
                    let mut dx = Matrix::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        let (xr, gr, s) = (xv.row(r), g.row(r), inv[r]);
                        let mut dot_term = F::zero();
                        for c in 0..xv.cols {
                            dgain[c] += gr[c] * xr[c] * s;
                            dot_term += gr[c] * gv.data[c] * xr[c];
                        }
                        let coef = s * s * s * dot_term / d;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = s * gr[c] * gv.data[c] - coef * xr[c];
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                    let dg = slot(&mut grads, *gain, 1, xv.cols);
                    for (a, b) in dg.data.iter_mut().zip(dgain) {
                        *a += b;
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (o, v) in dx.data.iter_mut().zip(&xv.data) {
                        *o *= gelu_grad(*v);
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    keys,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = (qv.rows, qv.cols);
                    let dh = d / heads;
                    let scale = F::of(1.0 / (dh as f64).sqrt());
                    let mut dq = Matrix::zeros(n, d);
                    let mut dk = Matrix::zeros(n, d);
                    let mut dv = Matrix::zeros(n, d);
                    let mut off = 0;
                    let mut dp = Vec::new();
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        for (i, ks) in keys.iter().enumerate() {
                            if ks.is_empty() {
                                continue;
                            }
                            let p = &probs[off..off + ks.len()];
                            off += ks.len();
                            let gi = &g.row(i)[cols.clone()];
                            dp.clear();
                            let mut weighted = F::zero();
                            for (&pj, &j) in p.iter().zip(ks) {
                                let vj = &vv.row(j as usize)[cols.clone()];
                                let x = dot(gi, vj);
                                weighted += pj * x;
                                dp.push(x);
                                let dvj = &mut dv.row_mut(j as usize)[cols.clone()];
                                for (a, b) in dvj.iter_mut().zip(gi) {
                                    *a += pj * *b;
                                }
                            }
                            let qi = qv.row(i)[cols.clone()].to_vec();
                            for ((&pj, &j), x) in p.iter().zip(ks).zip(&dp) {
                                let ds = pj * (*x - weighted) * scale;
                                let kj = &kv.row(j as usize)[cols.clone()];
                                let dqi = &mut dq.row_mut(i)[cols.clone()];
                                for (a, b) in dqi.iter_mut().zip(kj) {
                                    *a += ds * *b;
                                }
                                let dkj = &mut dk.row_mut(j as usize)[cols.clone()];
                                for (a, b) in dkj.iter_mut().zip(&qi) {
                                    *a += ds * *b;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, &dq);
                    accumulate(&mut grads, *k, &dk);
                    accumulate(&mut grads, *v, &dv);
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let dx = slot(&mut grads, *x, xv.rows, xv.cols);
                    for (o, &r) in rows.iter().enumerate() {
                        for (a, b) in dx.row_mut(r).iter_mut().zip(g.row(o)) {
                            *a += *b;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    softmax,
                } => {
                    let up = g.data[0];
                    let mut dz = softmax.clone();
                    for r in 0..dz.rows {
                        let w = weights[r] * up;
                        let row = dz.row_mut(r);
                        row[targets[r]] -= F::one();
                        for x in row {
                            *x *= w;
                        }
                    }
                    accumulate(&mut grads, *logits, &dz);
                }
                Op::Scale(x, s) => {
                    let mut dx = g;
                    for v in &mut dx.data {
                        *v *= *s;
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::SumSquares(x) => {
                    let xv = self.value(*x);
                    let two = F::of(2.0) * g.data[0];
                    let mut dx = xv.clone();
                    for v in &mut dx.data {
                        *v *= two;
                    }
                    accumulate(&mut grads, *x, &dx);
                }
            }
        }
        Ok(grads)
    }
}

fn slot<F: Float>(grads: &mut [Option<Matrix<F>>], id: NodeId, rows: usize, cols: usize) -> &mut Matrix<F> {
    grads[id.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
}

fn accumulate<F: Float>(grads: &mut [Option<Matrix<F>>], id: NodeId, g: &Matrix<F>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(g),
        empty => *empty = Some(g.clone()),
    }
}

fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (x, y)| acc + *x * *y)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Float>(x: F) -> F {
    let half = F::of(0.5);
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Float>(x: F) -> F {
    let half = F::of(0.5);
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}
