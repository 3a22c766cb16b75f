//! Reverse-mode differentiation over a flat tape of matrix operations.
//!
//! The tape is rebuilt for every forward pass. Leaves are either trainable
//! parameters or constants; a node only carries a gradient if some trainable
//! leaf feeds into it, so frozen base weights cost nothing in backward.

use crate::error::{ForaError, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};

/// Epsilon inside the layernorm variance square root.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node of one [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Add,
    Scale,
    Relu,
    SoftmaxRows,
    LayerNormRows,
    MulRow,
    EmbedLookup,
    CrossEntropy,
    CausalAttention,
    Sum,
    SumSquares,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    SoftmaxRows(usize),
    LayerNormRows { x: usize, inv_std: Vec<f64> },
    MulRow(usize, usize),
    EmbedLookup { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Matrix },
    CausalAttention { q: usize, k: usize, v: usize, n_heads: usize, seq_len: usize, probs: Vec<Vec<f64>> },
    Sum(usize),
    SumSquares(usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LayerNormRows { .. } => OpKind::LayerNormRows,
            Op::MulRow(..) => OpKind::MulRow,
            Op::EmbedLookup { .. } => OpKind::EmbedLookup,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::CausalAttention { .. } => OpKind::CausalAttention,
            Op::Sum(..) => OpKind::Sum,
            Op::SumSquares(..) => OpKind::SumSquares,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Topologically ordered record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: Var, b: Var) -> ForaError {
    ForaError::ShapeMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.id].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.id].op.kind()
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var { id, rows, cols }
    }

    fn ng(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(mismatch("matmul", a, b));
        }
        let value = matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a.id) || self.ng(b.id);
        Ok(self.push(Op::MatMul(a.id, b.id), value, ng))
    }

    /// `a · bᵀ`; the natural form for `x Wᵀ` with `W` stored `d_out x d_in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.cols {
            return Err(mismatch("matmul_nt", a, b));
        }
        let value = matmul_nt(self.value(a), self.value(b))?;
        let ng = self.ng(a.id) || self.ng(b.id);
        Ok(self.push(Op::MatMulNt(a.id, b.id), value, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(mismatch("add", a, b));
        }
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a.id) || self.ng(b.id);
        Ok(self.push(Op::Add(a.id, b.id), value, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a.id);
        self.push(Op::Scale(a.id, s), value, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a.id);
        self.push(Op::Relu(a.id), value, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        let ng = self.ng(a.id);
        self.push(Op::SoftmaxRows(a.id), value, ng)
    }

    /// Per-row standardization `(x − μ) / sqrt(σ² + ε)` with no affine part;
    /// pair with [`Tape::mul_row`] for a gain.
    pub fn layernorm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = value.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(a.id);
        self.push(Op::LayerNormRows { x: a.id, inv_std }, value, ng)
    }

    /// Broadcast elementwise product of every row of `x` with the `1 x d`
    /// row vector `gain`.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        if gain.rows != 1 || gain.cols != x.cols {
            return Err(mismatch("mul_row", x, gain));
        }
        let g = self.value(gain).row(0).to_vec();
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            value.row_mut(i).iter_mut().zip(&g).for_each(|(v, gv)| *v *= gv);
        }
        let ng = self.ng(x.id) || self.ng(gain.id);
        Ok(self.push(Op::MulRow(x.id, gain.id), value, ng))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= table.rows) {
            return Err(ForaError::ShapeMismatch {
                op: "embed_lookup (token id out of range)",
                lhs: table.shape(),
                rhs: (bad, 0),
            });
        }
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(table.id);
        Ok(self.push(
            Op::EmbedLookup {
                table: table.id,
                ids: ids.to_vec(),
            },
            value,
            ng,
        ))
    }

    /// Mean token cross-entropy of `logits` (one row per position) against
    /// `targets`, fused with log-softmax. Returns a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        if targets.len() != logits.rows || targets.iter().any(|&t| t >= logits.cols) {
            return Err(ForaError::ShapeMismatch {
                op: "cross_entropy",
                lhs: logits.shape(),
                rhs: (targets.len(), targets.iter().copied().max().unwrap_or(0)),
            });
        }
        let l = self.value(logits);
        let mut probs = l.clone();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = l.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[t];
            softmax_in_place(probs.row_mut(i));
        }
        let n = targets.len().max(1) as f64;
        let value = Matrix::from_rows(&[[total / n]]);
        let ng = self.ng(logits.id);
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                probs,
            },
            value,
            ng,
        ))
    }

    /// Multi-head causal self-attention over stacked sequences.
    ///
    /// `q`, `k`, `v` are `(n_seq · seq_len) x d` with sequence `s` occupying
    /// rows `s·seq_len .. (s+1)·seq_len`. Head `h` uses columns
    /// `h·d/n_heads .. (h+1)·d/n_heads`. Scores are scaled by `1/sqrt(d_head)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        if q.shape() != k.shape() {
            return Err(mismatch("causal_attention", q, k));
        }
        if q.shape() != v.shape() {
            return Err(mismatch("causal_attention", q, v));
        }
        let (n, d) = q.shape();
        if n_heads == 0 || d % n_heads != 0 || seq_len == 0 || n % seq_len != 0 {
            return Err(ForaError::ShapeMismatch {
                op: "causal_attention (heads/seq_len)",
                lhs: q.shape(),
                rhs: (n_heads, seq_len),
            });
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity((n / seq_len) * n_heads);
        for s in 0..n / seq_len {
            let base = s * seq_len;
            for h in 0..n_heads {
                let c0 = h * dh;
                // Lower-triangular probabilities, row i holds entries 0..=i.
                let mut p = vec![0.0; seq_len * seq_len];
                for i in 0..seq_len {
                    let qi = &qm.row(base + i)[c0..c0 + dh];
                    let prow = &mut p[i * seq_len..i * seq_len + i + 1];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &km.row(base + j)[c0..c0 + dh];
                        *pj = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    softmax_in_place(prow);
                    let orow = &mut out.row_mut(base + i)[c0..c0 + dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vm.row(base + j)[c0..c0 + dh];
                        orow.iter_mut().zip(vj).for_each(|(o, vv)| *o += pj * vv);
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.ng(q.id) || self.ng(k.id) || self.ng(v.id);
        Ok(self.push(
            Op::CausalAttention {
                q: q.id,
                k: k.id,
                v: v.id,
                n_heads,
                seq_len,
                probs,
            },
            out,
            ng,
        ))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_rows(&[[self.value(a).sum()]]);
        let ng = self.ng(a.id);
        self.push(Op::Sum(a.id), value, ng)
    }

    /// Sum of squared entries, as a `1 x 1` node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Matrix::from_rows(&[[self.value(a).sum_squares()]]);
        let ng = self.ng(a.id);
        self.push(Op::SumSquares(a.id), value, ng)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Take ownership of a gradient, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => {
            existing
                .add_assign(&g, 1.0)
                .expect("gradient shape matches node shape");
        }
        None => *slot = Some(g),
    }
}

/// Differentiate the `1 x 1` node `loss` with respect to every node that
/// depends on a trainable leaf.
pub fn backward(tape: &Tape, loss: Var) -> Result<Gradients> {
    if loss.shape() != (1, 1) {
        return Err(ForaError::NonScalarLoss {
            rows: loss.rows,
            cols: loss.cols,
        });
    }
    let mut grads: Vec<Option<Matrix>> = (0..tape.nodes.len()).map(|_| None).collect();
    if !tape.nodes[loss.id].needs_grad {
        return Ok(Gradients { grads });
    }
    grads[loss.id] = Some(Matrix::from_rows(&[[1.0]]));

    for id in (0..=loss.id).rev() {
        let node = &tape.nodes[id];
        if !node.needs_grad {
            continue;
        }
        let Some(upstream) = grads[id].take() else {
            continue;
        };
        let ng = |i: usize| tape.nodes[i].needs_grad;
        let val = |i: usize| &tape.nodes[i].value;
        match &node.op {
            Op::Leaf => {
                grads[id] = Some(upstream);
                continue;
            }
            Op::MatMul(a, b) => {
                if ng(*a) {
                    accumulate(&mut grads[*a], matmul_nt(&upstream, val(*b))?);
                }
                if ng(*b) {
                    accumulate(&mut grads[*b], matmul_tn(val(*a), &upstream)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A.
                if ng(*a) {
                    accumulate(&mut grads[*a], matmul(&upstream, val(*b))?);
                }
                if ng(*b) {
                    accumulate(&mut grads[*b], matmul_tn(&upstream, val(*a))?);
                }
            }
            Op::Add(a, b) => {
                if ng(*a) && ng(*b) {
                    accumulate(&mut grads[*a], upstream.clone());
                    accumulate(&mut grads[*b], upstream);
                } else if ng(*a) {
                    accumulate(&mut grads[*a], upstream);
                } else if ng(*b) {
                    accumulate(&mut grads[*b], upstream);
                }
            }
            Op::Scale(a, s) => {
                accumulate(&mut grads[*a], upstream.scale(*s));
            }
            Op::Relu(a) => {
                let x = val(*a);
                let mut g = upstream;
                g.data_mut()
                    .iter_mut()
                    .zip(x.data())
                    .for_each(|(gv, &xv)| {
                        if xv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                accumulate(&mut grads[*a], g);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut g = upstream;
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row_mut(i);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gr.iter_mut().zip(yr).for_each(|(gv, &yv)| *gv = yv * (*gv - dot));
                }
                accumulate(&mut grads[*a], g);
            }
            Op::LayerNormRows { x, inv_std } => {
                let y = &node.value;
                let n = y.cols() as f64;
                let mut g = upstream;
                for (i, &is) in inv_std.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = g.row_mut(i);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    gr.iter_mut()
                        .zip(yr)
                        .for_each(|(gv, &yv)| *gv = is * (*gv - mean_g - yv * mean_gy));
                }
                accumulate(&mut grads[*x], g);
            }
            Op::MulRow(x, gain) => {
                if ng(*gain) {
                    let xv = val(*x);
                    let mut dg = Matrix::zeros(1, xv.cols());
                    for i in 0..xv.rows() {
                        dg.row_mut(0)
                            .iter_mut()
                            .zip(xv.row(i).iter().zip(upstream.row(i)))
                            .for_each(|(d, (a, b))| *d += a * b);
                    }
                    accumulate(&mut grads[*gain], dg);
                }
                if ng(*x) {
                    let gv = val(*gain).row(0).to_vec();
                    let mut dx = upstream;
                    for i in 0..dx.rows() {
                        dx.row_mut(i).iter_mut().zip(&gv).for_each(|(d, g)| *d *= g);
                    }
                    accumulate(&mut grads[*x], dx);
                }
            }
            Op::EmbedLookup { table, ids } => {
                let t = val(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (r, &tok) in ids.iter().enumerate() {
                    dt.row_mut(tok)
                        .iter_mut()
                        .zip(upstream.row(r))
                        .for_each(|(d, u)| *d += u);
                }
                accumulate(&mut grads[*table], dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = upstream[(0, 0)] / targets.len().max(1) as f64;
                let mut g = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    g[(i, t)] -= 1.0;
                }
                g.scale_in_place(scale);
                accumulate(&mut grads[*logits], g);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                seq_len,
                probs,
            } => {
                let (qm, km, vm) = (val(*q), val(*k), val(*v));
                let (n, d) = qm.shape();
                let dh = d / n_heads;
                let t = *seq_len;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(n, d);
                let mut dk = Matrix::zeros(n, d);
                let mut dv = Matrix::zeros(n, d);
                let mut dp = vec![0.0; t];
                for s in 0..n / t {
                    let base = s * t;
                    for h in 0..*n_heads {
                        let c0 = h * dh;
                        let p = &probs[s * n_heads + h];
                        for i in 0..t {
                            let prow = &p[i * t..i * t + i + 1];
                            let go = &upstream.row(base + i)[c0..c0 + dh];
                            // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                            for (j, &pij) in prow.iter().enumerate() {
                                let vj = &vm.row(base + j)[c0..c0 + dh];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dv.row_mut(base + j)[c0..c0 + dh]
                                    .iter_mut()
                                    .zip(go)
                                    .for_each(|(d, g)| *d += pij * g);
                            }
                            let dot: f64 = prow.iter().zip(&dp[..=i]).map(|(a, b)| a * b).sum();
                            // dS_ij = P_ij (dP_ij − Σ_k P_ik dP_ik), scaled.
                            for (j, &pij) in prow.iter().enumerate() {
                                let ds = pij * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &km.row(base + j)[c0..c0 + dh];
                                dq.row_mut(base + i)[c0..c0 + dh]
                                    .iter_mut()
                                    .zip(kj)
                                    .for_each(|(d, kv)| *d += ds * kv);
                                let qi = &qm.row(base + i)[c0..c0 + dh];
                                dk.row_mut(base + j)[c0..c0 + dh]
                                    .iter_mut()
                                    .zip(qi)
                                    .for_each(|(d, qv)| *d += ds * qv);
                            }
                        }
                    }
                }
                if ng(*q) {
                    accumulate(&mut grads[*q], dq);
                }
                if ng(*k) {
                    accumulate(&mut grads[*k], dk);
                }
                if ng(*v) {
                    accumulate(&mut grads[*v], dv);
                }
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                let u = upstream[(0, 0)];
                accumulate(&mut grads[*a], Matrix::from_fn(r, c, |_, _| u));
            }
            Op::SumSquares(a) => {
                let u = upstream[(0, 0)];
                accumulate(&mut grads[*a], val(*a).scale(2.0 * u));
            }
        }
    }
    Ok(Gradients { grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_gaussian;
    use crate::rng::{streams, RngStream};

    /// Central-difference check of d(loss)/d(param) on `n_entries` sampled
    /// entries. `build` records the loss on a fresh tape given the parameter.
    fn fd_check(param: &Matrix, n_entries: usize, seed: u64, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let p = tape.param(param.clone());
        let loss = build(&mut tape, p);
        let grads = backward(&tape, loss).unwrap();
        let g = grads.get(p).unwrap().clone();
        let eval = |m: &Matrix| {
            let mut t = Tape::new();
            let pv = t.param(m.clone());
            let l = build(&mut t, pv);
            t.value(l)[(0, 0)]
        };
        let h = 1e-5;
        let mut s = RngStream::new(seed, streams::TEST);
        for _ in 0..n_entries {
            let idx = s.below(param.data().len());
            let mut plus = param.clone();
            plus.data_mut()[idx] += h;
            let mut minus = param.clone();
            minus.data_mut()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = g.data()[idx];
            let rel = (analytic - numeric).abs() / (analytic.abs() + 1e-8);
            assert!(
                rel <= 1e-5 || (analytic - numeric).abs() <= 1e-9,
                "entry {idx}: analytic {analytic} numeric {numeric} rel {rel}"
            );
        }
    }

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix {
        random_gaussian(rows, cols, 1.0, &mut RngStream::new(seed, streams::TEST))
    }

    #[test]
    fn add_zero_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(rand(3, 4, 1));
        let z = t.constant(Matrix::zeros(3, 4));
        let y = t.add(x, z).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_fn(2, 5, |_, _| 3.7));
        let y = t.softmax_rows(x);
        for i in 0..2 {
            let row = t.value(y).row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
            assert!(row.iter().all(|&v| (v - 0.2).abs() <= 1e-15));
        }
    }

    #[test]
    fn cross_entropy_matches_hand_formula() {
        // Logits (2, 0, -1), target 0: −log p0 = log(e² + 1 + e⁻¹) − 2.
        let mut t = Tape::new();
        let l = t.constant(Matrix::from_rows(&[[2.0, 0.0, -1.0]]));
        let ce = t.cross_entropy(l, &[0]).unwrap();
        let expected = ((2f64).exp() + 1.0 + (-1f64).exp()).ln() - 2.0;
        assert!((t.value(ce)[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_op() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("(2, 3)"), "{err}");
        let c = t.constant(Matrix::zeros(3, 2));
        assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let a = t.param(Matrix::zeros(2, 2));
        assert!(matches!(
            backward(&t, a),
            Err(ForaError::NonScalarLoss { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        // loss = sum(W x): ∂/∂W = 1 · xᵀ.
        let x = Matrix::from_rows(&[[1.0], [-2.0], [0.5]]);
        let mut t = Tape::new();
        let w = t.param(rand(2, 3, 2));
        let xv = t.constant(x.clone());
        let wx = t.matmul(w, xv).unwrap();
        let loss = t.sum(wx);
        let g = backward(&t, loss).unwrap();
        let expected = Matrix::from_fn(2, 3, |_, j| x[(j, 0)]);
        assert_eq!(g.get(w).unwrap(), &expected);
    }

    #[test]
    fn half_squared_error_gradient() {
        // ½‖Wx − y‖², W=[[1]], x=[2], y=[0] → (Wx − y) xᵀ = 4.
        let mut t = Tape::new();
        let w = t.param(Matrix::from_rows(&[[1.0]]));
        let x = t.constant(Matrix::from_rows(&[[2.0]]));
        let neg_y = t.constant(Matrix::from_rows(&[[0.0]]));
        let wx = t.matmul(w, x).unwrap();
        let r = t.add(wx, neg_y).unwrap();
        let sq = t.sum_squares(r);
        let loss = t.scale(sq, 0.5);
        let g = backward(&t, loss).unwrap();
        assert_eq!(g.get(w).unwrap()[(0, 0)], 4.0);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let w = t.constant(rand(3, 3, 3));
        let p = t.param(rand(3, 3, 4));
        let y = t.matmul(w, p).unwrap();
        let loss = t.sum_squares(y);
        let g = backward(&t, loss).unwrap();
        assert!(g.get(w).is_none());
        assert!(g.get(p).is_some());
    }

    #[test]
    fn fd_matmul_both_sides() {
        let b = rand(4, 3, 6);
        fd_check(&rand(5, 4, 5), 5, 1, |t, p| {
            let bv = t.constant(b.clone());
            let y = t.matmul(p, bv).unwrap();
            t.sum_squares(y)
        });
        let a = rand(5, 4, 7);
        fd_check(&rand(4, 3, 8), 5, 2, |t, p| {
            let av = t.constant(a.clone());
            let y = t.matmul(av, p).unwrap();
            t.sum_squares(y)
        });
    }

    #[test]
    fn fd_matmul_nt_both_sides() {
        let b = rand(6, 4, 9);
        fd_check(&rand(5, 4, 10), 5, 3, |t, p| {
            let bv = t.constant(b.clone());
            let y = t.matmul_nt(p, bv).unwrap();
            t.sum_squares(y)
        });
        let a = rand(5, 4, 11);
        fd_check(&rand(6, 4, 12), 5, 4, |t, p| {
            let av = t.constant(a.clone());
            let y = t.matmul_nt(av, p).unwrap();
            t.sum_squares(y)
        });
    }

    #[test]
    fn fd_add_scale_relu_sum() {
        let c = rand(4, 5, 13);
        fd_check(&rand(4, 5, 14), 5, 5, |t, p| {
            let cv = t.constant(c.clone());
            let a = t.add(p, cv).unwrap();
            let s = t.scale(a, -1.7);
            let r = t.relu(s);
            let sq = t.sum_squares(r);
            let lin = t.sum(p);
            t.add(sq, lin).unwrap()
        });
    }

    #[test]
    fn fd_softmax_rows() {
        let w = rand(1, 6, 15);
        fd_check(&rand(4, 6, 16), 5, 6, |t, p| {
            let s = t.softmax_rows(p);
            let g = t.constant(w.clone());
            let m = t.mul_row(s, g).unwrap();
            t.sum_squares(m)
        });
    }

    #[test]
    fn fd_layernorm_rows() {
        let w = rand(3, 8, 17);
        fd_check(&rand(3, 8, 18), 5, 7, |t, p| {
            let y = t.layernorm_rows(p);
            let wv = t.constant(w.clone());
            let prod = t.matmul_nt(y, wv).unwrap();
            t.sum_squares(prod)
        });
    }

    #[test]
    fn fd_mul_row_gain() {
        let x = rand(5, 4, 19);
        fd_check(&rand(1, 4, 20), 4, 8, |t, p| {
            let xv = t.constant(x.clone());
            let y = t.mul_row(xv, p).unwrap();
            let y2 = t.relu(y);
            t.sum_squares(y2)
        });
    }

    #[test]
    fn fd_embed_lookup_with_repeats() {
        let ids = [2, 0, 2, 3, 1, 2];
        let w = rand(4, 3, 21);
        fd_check(&rand(5, 4, 22), 5, 9, |t, p| {
            let e = t.embed_lookup(p, &ids).unwrap();
            let wv = t.constant(w.clone());
            let y = t.matmul(e, wv).unwrap();
            t.sum_squares(y)
        });
    }

    #[test]
    fn fd_cross_entropy() {
        let targets = [3, 0, 5, 5];
        fd_check(&rand(4, 6, 23), 5, 10, |t, p| t.cross_entropy(p, &targets).unwrap());
    }

    #[test]
    fn fd_causal_attention_each_input() {
        let (n_heads, seq_len) = (2, 3);
        let q0 = rand(6, 4, 24);
        let k0 = rand(6, 4, 25);
        let v0 = rand(6, 4, 26);
        let w = rand(6, 4, 27);
        for which in 0..3 {
            let param = [&q0, &k0, &v0][which].clone();
            fd_check(&param, 6, 11 + which as u64, |t, p| {
                let mut vars: Vec<Var> = [&q0, &k0, &v0].iter().map(|m| t.constant((*m).clone())).collect();
                vars[which] = p;
                let o = t.causal_attention(vars[0], vars[1], vars[2], n_heads, seq_len).unwrap();
                let wv = t.constant(w.clone());
                let prod = t.matmul_nt(o, wv).unwrap();
                t.sum(prod)
            });
        }
    }

    #[test]
    fn causal_attention_first_position_copies_value() {
        let mut t = Tape::new();
        let q = t.constant(rand(4, 2, 28));
        let k = t.constant(rand(4, 2, 29));
        let v0 = rand(4, 2, 30);
        let v = t.constant(v0.clone());
        let o = t.causal_attention(q, k, v, 1, 2).unwrap();
        // Position 0 of each sequence attends only to itself.
        assert_eq!(t.value(o).row(0), v0.row(0));
        assert_eq!(t.value(o).row(2), v0.row(2));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let x = rand(3, 4, 31);
        let w0 = rand(4, 4, 32);
        let build = |t: &mut Tape, a: f64, b: f64| {
            let w = t.param(w0.clone());
            let xv = t.constant(x.clone());
            let h = t.matmul_nt(xv, w).unwrap();
            let l1 = t.cross_entropy(h, &[0, 1, 2]).unwrap();
            let r = t.relu(h);
            let l2 = t.sum_squares(r);
            let s1 = t.scale(l1, a);
            let s2 = t.scale(l2, b);
            let l = t.add(s1, s2).unwrap();
            (w, l)
        };
        let grad_of = |a: f64, b: f64| {
            let mut t = Tape::new();
            let (w, l) = build(&mut t, a, b);
            backward(&t, l).unwrap().get(w).unwrap().clone()
        };
        let (a, b) = (0.7, -2.3);
        let combined = grad_of(a, b);
        let mut expected = grad_of(1.0, 0.0).scale(a);
        expected.add_assign(&grad_of(0.0, 1.0), b).unwrap();
        assert!(combined.max_abs_diff(&expected) <= 1e-12);
    }
}
