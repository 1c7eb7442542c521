//! Reverse-mode differentiation over layer-level operations.
//!
//! A [`GradientTape`] records each operation together with the values its
//! backward rule needs. Nodes only carry gradient work when some input
//! descends from a trainable leaf, so frozen weights cost a forward pass and
//! nothing more.

use std::collections::HashMap;
use std::hash::Hash;

use super::matrix::{matmul_nt_acc, matmul_tn_acc, Matrix};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<K> {
    Leaf(Option<K>),
    MatMul(Var, Var),
    Add(Var, Var),
    /// Elementwise product with a constant 0/1 mask.
    Mask(Var, Matrix),
    Scale(Var, f64),
    Gather {
        table: Var,
        tokens: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        qkv: Var,
        seq: usize,
        heads: usize,
        probs: Vec<Matrix>,
    },
    MeanPool {
        x: Var,
        seq: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

struct Node<K> {
    value: Matrix,
    op: Op<K>,
    needs_grad: bool,
}

pub struct GradientTape<K> {
    nodes: Vec<Node<K>>,
}

impl<K: Copy + Eq + Hash> Default for GradientTape<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K: Copy + Eq + Hash> GradientTape<K> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op<K>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf(None), false)
    }

    /// A trainable input whose gradient is reported under `key`.
    pub fn param(&mut self, key: K, value: Matrix) -> Var {
        self.push(value, Op::Leaf(Some(key)), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mask(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        self.value(a).ensure_same_shape(&mask, "mask")?;
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        let ng = self.needs(a);
        Ok(self.push(out, Op::Mask(a, mask), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Row lookup: output row `i` is `table[tokens[i]]`.
    pub fn gather(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Matrix::zeros(tokens.len(), t.cols());
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= t.rows() {
                return Err(Error::Input(format!(
                    "token {tok} outside a table of {} rows",
                    t.rows()
                )));
            }
            out.row_mut(i).copy_from_slice(t.row(tok));
        }
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                tokens: tokens.to_vec(),
            },
            ng,
        ))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols() as f64;
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.needs(x);
        self.push(out, Op::LayerNorm { x, inv_std }, ng)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Bidirectional multi-head self-attention over a fused projection.
    ///
    /// `qkv` holds `batch * seq` rows laid out as `[Q | K | V]`, each `d`
    /// wide; the output has `batch * seq` rows of width `d`.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize) -> Result<Var> {
        let q = self.value(qkv);
        if !q.cols().is_multiple_of(3) || seq == 0 || !q.rows().is_multiple_of(seq) {
            return Err(Error::Dimension(format!(
                "attention: fused projection {}x{} with seq {seq}",
                q.rows(),
                q.cols()
            )));
        }
        let d = q.cols() / 3;
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Dimension(format!(
                "attention: width {d} not divisible into {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = q.rows() / seq;
        let mut out = Matrix::zeros(q.rows(), d);
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let base = b * seq;
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                let mut p = Matrix::zeros(seq, seq);
                for i in 0..seq {
                    let qi = &q.row(base + i)[qo..qo + dh];
                    let prow = p.row_mut(i);
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &q.row(base + j)[ko..ko + dh];
                        *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(prow);
                }
                for i in 0..seq {
                    for j in 0..seq {
                        let pij = p.get(i, j);
                        let vj = &q.row(base + j)[vo..vo + dh];
                        let orow = &mut out.row_mut(base + i)[qo..qo + dh];
                        for (o, v) in orow.iter_mut().zip(vj) {
                            *o += pij * v;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.needs(qkv);
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Mean over each consecutive group of `seq` rows.
    pub fn mean_pool(&mut self, x: Var, seq: usize) -> Result<Var> {
        let xv = self.value(x);
        if seq == 0 || !xv.rows().is_multiple_of(seq) {
            return Err(Error::Dimension(format!(
                "mean_pool: {} rows in groups of {seq}",
                xv.rows()
            )));
        }
        let groups = xv.rows() / seq;
        let mut out = Matrix::zeros(groups, xv.cols());
        for g in 0..groups {
            for r in 0..seq {
                for (o, v) in out.row_mut(g).iter_mut().zip(xv.row(g * seq + r)) {
                    *o += v;
                }
            }
            out.row_mut(g).iter_mut().for_each(|o| *o /= seq as f64);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::MeanPool { x, seq }, ng))
    }

    /// Mean softmax cross-entropy of `logits` rows against `labels`; 1x1.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() || lv.rows() == 0 {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} logit rows for {} labels",
                lv.rows(),
                labels.len()
            )));
        }
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= lv.cols() {
                return Err(Error::Input(format!(
                    "label {y} outside {} classes",
                    lv.cols()
                )));
            }
            let row = probs.row_mut(r);
            let lse = log_sum_exp(row);
            total += lse - row[y];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = Matrix::filled(1, 1, total / labels.len() as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Back-propagates from the scalar `output` and returns the gradient for
    /// every parameter leaf that influences it.
    pub fn backward(&self, output: Var) -> Result<HashMap<K, Matrix>> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got {}x{}",
                out.rows(),
                out.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut result = HashMap::new();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf(key) => {
                    if let Some(k) = key {
                        result.insert(*k, g);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let bv = self.value(*b);
                        let mut ga = Matrix::zeros(g.rows(), bv.rows());
                        matmul_nt_acc(&g, bv, &mut ga);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let av = self.value(*a);
                        let mut gb = Matrix::zeros(av.cols(), g.cols());
                        matmul_tn_acc(av, &g, &mut gb);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    match (self.needs(a), self.needs(b)) {
                        (true, true) => {
                            accumulate(&mut grads, a, g.clone());
                            accumulate(&mut grads, b, g);
                        }
                        (true, false) => accumulate(&mut grads, a, g),
                        (false, true) => accumulate(&mut grads, b, g),
                        (false, false) => {}
                    }
                }
                Op::Mask(a, m) => {
                    let ga = g.zip_map(m, |x, m| x * m);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Gather { table, tokens } => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows(), t.cols());
                    for (i, &tok) in tokens.iter().enumerate() {
                        for (o, v) in gt.row_mut(tok).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (gy, yr) = (g.row(r), y.row(r));
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(gy).zip(yr) {
                            *o = is * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let gx = g.zip_map(xv, |gv, v| gv * gelu_grad(v));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Attention {
                    qkv,
                    seq,
                    heads,
                    probs,
                } => {
                    let gq = attention_backward(self.value(*qkv), &g, *seq, *heads, probs);
                    accumulate(&mut grads, *qkv, gq);
                }
                Op::MeanPool { x, seq } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    let inv = 1.0 / *seq as f64;
                    for r in 0..xv.rows() {
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(r / seq)) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.get(0, 0) / labels.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        let row = gl.row_mut(r);
                        row[y] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        Ok(result)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn attention_backward(
    qkv: &Matrix,
    g: &Matrix,
    seq: usize,
    heads: usize,
    probs: &[Matrix],
) -> Matrix {
    let d = qkv.cols() / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let batch = qkv.rows() / seq;
    let mut out = Matrix::zeros(qkv.rows(), qkv.cols());
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        let base = b * seq;
        for h in 0..heads {
            let p = &probs[b * heads + h];
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..seq {
                let gi = &g.row(base + i)[qo..qo + dh];
                // dV_j += p_ij * dO_i ; dP_ij = dO_i . V_j
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let pij = p.get(i, j);
                    let vj = &qkv.row(base + j)[vo..vo + dh];
                    *dpj = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let dv = &mut out.row_mut(base + j)[vo..vo + dh];
                    for (o, gv) in dv.iter_mut().zip(gi) {
                        *o += pij * gv;
                    }
                }
                let prow = p.row(i);
                let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..seq {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..dh {
                        let kj = qkv.get(base + j, ko + t);
                        let qi = qkv.get(base + i, qo + t);
                        let idx_q = (base + i) * qkv.cols() + qo + t;
                        let idx_k = (base + j) * qkv.cols() + ko + t;
                        out.data_mut()[idx_q] += ds * kj;
                        out.data_mut()[idx_k] += ds * qi;
                    }
                }
            }
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    row.iter_mut().for_each(|v| *v = (*v - lse).exp());
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
