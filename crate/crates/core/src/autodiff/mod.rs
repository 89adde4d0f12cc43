//! Tape-based reverse-mode automatic differentiation over dense 2-D `f64`
//! tensors.
//!
//! Every op appends a node to the [`Tape`] and returns a [`Var`] handle.
//! [`Tape::backward`] walks the tape once in reverse and consumes it; a
//! second call is an error until [`Tape::reset`].
//!
//! The op set is the one the encoder needs, with a few fused kernels
//! (layer norm, embedding sums, block-diagonal attention, the two losses)
//! so a training step records a few dozen nodes rather than thousands.

mod attention;
mod gemm;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use attention::{Block, BlockLayout};

use crate::imbalance::{self, LossError, LossValue, Reduction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(1, 1, vec![value])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("no graph has been recorded for this variable")]
    NoRecordedGraph,
    #[error("backward already ran on this tape; reset it first")]
    DoubleBackward,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 2]),
}

/// One (table, row) pair of an embedding-sum lookup.
pub type Lookup = (usize, usize);

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Gelu {
        x: Var,
        derivative: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    EmbedSum {
        tables: Vec<Var>,
        offsets: Vec<usize>,
        lookups: Vec<Lookup>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        qkv: Var,
        bias: Var,
        layout: Arc<BlockLayout>,
        probs: Vec<f64>,
    },
    /// Scalar loss with a precomputed gradient with respect to `x`.
    Loss {
        x: Var,
        grad: Vec<f64>,
    },
    Sum(Var),
    Dot {
        x: Var,
        coeffs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (value, deriv)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; its gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · w (+ b)` with `x: [n, in]`, `w: [in, out]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols, wv.rows, "linear: inner dimensions");
        let (n, k, m) = (xv.rows, xv.cols, wv.cols);
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), [1, m], "linear: bias shape");
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(&bv.data);
            }
        }
        gemm::gemm(n, k, m, &xv.data, false, &wv.data, false, &mut out, 1.0);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(n, m, out), Op::Linear { x, w, b }, &inputs)
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        self.linear(x, w, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.rows, av.cols, data);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.rows, xv.cols, xv.data.iter().map(|v| v * factor).collect());
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (data, derivative) = xv.data.iter().map(|&v| gelu_parts(v)).unzip();
        let value = Tensor::new(xv.rows, xv.cols, data);
        self.push(value, Op::Gelu { x, derivative }, &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1, d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols;
        assert_eq!(gv.shape(), [1, d], "layer_norm: gamma shape");
        assert_eq!(bv.shape(), [1, d], "layer_norm: beta shape");
        let mut normalized = vec![0.0; xv.data.len()];
        let mut inv_std = Vec::with_capacity(xv.rows);
        let mut out = vec![0.0; xv.data.len()];
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(istd);
            let nrow = &mut normalized[r * d..(r + 1) * d];
            let orow = &mut out[r * d..(r + 1) * d];
            for c in 0..d {
                nrow[c] = (row[c] - mean) * istd;
                orow[c] = nrow[c] * gv.data[c] + bv.data[c];
            }
        }
        let value = Tensor::new(xv.rows, d, out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Row `i` of the output is the sum of the table rows named in
    /// `lookups[i]`. All tables share a column count.
    pub fn embed_sum(&mut self, tables: &[Var], lookups: &[Vec<Lookup>]) -> Var {
        let d = self.value(tables[0]).cols;
        for &t in tables {
            assert_eq!(self.value(t).cols, d, "embed_sum: table widths");
        }
        let mut out = vec![0.0; lookups.len() * d];
        let mut offsets = Vec::with_capacity(lookups.len() + 1);
        let mut flat = Vec::new();
        offsets.push(0);
        for (i, row_lookups) in lookups.iter().enumerate() {
            let orow = &mut out[i * d..(i + 1) * d];
            for &(t, r) in row_lookups {
                let table = self.value(tables[t]);
                assert!(r < table.rows, "embed_sum: row {r} outside table {t}");
                for (o, v) in orow.iter_mut().zip(table.row(r)) {
                    *o += v;
                }
                flat.push((t, r));
            }
            offsets.push(flat.len());
        }
        let value = Tensor::new(lookups.len(), d, out);
        self.push(
            value,
            Op::EmbedSum {
                tables: tables.to_vec(),
                offsets,
                lookups: flat,
            },
            tables,
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * xv.cols);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let value = Tensor::new(rows.len(), xv.cols, data);
        self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Elementwise product with a fixed mask, typically `0` or `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.data.len(), "dropout: mask length");
        let data = xv.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.rows, xv.cols, data);
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// Multi-head self-attention restricted to the diagonal blocks of
    /// `layout`. `qkv` is `[n, 3d]` (queries, keys, values side by side);
    /// `bias` is `[buckets, heads]` and is added to the scaled scores
    /// according to each block's bucket matrix.
    pub fn block_attention(&mut self, qkv: Var, bias: Var, layout: Arc<BlockLayout>) -> Var {
        let (qv, bv) = (self.value(qkv), self.value(bias));
        let (out, probs) = attention::forward(qv, bv, &layout);
        self.push(
            out,
            Op::Attention {
                qkv,
                bias,
                layout,
                probs,
            },
            &[qkv, bias],
        )
    }

    /// Weighted cross-entropy of `softmax(logits)` against `labels`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
        reduction: Reduction,
    ) -> Result<(Var, LossValue), LossError> {
        let lv = self.value(logits);
        if lv.cols != weights.len() {
            return Err(LossError::ShapeMismatch(format!(
                "{} logit columns for {} weights",
                lv.cols,
                weights.len()
            )));
        }
        let (loss, grad) = imbalance::cross_entropy_with_logits(&lv.data, labels, weights, reduction)?;
        let var = self.push(Tensor::scalar(loss.value), Op::Loss { x: logits, grad }, &[logits]);
        Ok((var, loss))
    }

    /// Mean absolute error of a `[n, 1]` prediction column.
    pub fn mae(&mut self, predictions: Var, targets: &[f64]) -> Result<(Var, LossValue), LossError> {
        let pv = self.value(predictions);
        if pv.cols != 1 {
            return Err(LossError::ShapeMismatch(format!(
                "mae expects one prediction column, got {}",
                pv.cols
            )));
        }
        let (loss, grad) = imbalance::mae(&pv.data, targets)?;
        let var = self.push(Tensor::scalar(loss.value), Op::Loss { x: predictions, grad }, &[predictions]);
        Ok((var, loss))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// `Σ x ⊙ coeffs` as a scalar.
    pub fn dot(&mut self, x: Var, coeffs: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(coeffs.len(), xv.data.len(), "dot: coefficient length");
        let total = xv.data.iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(total), Op::Dot { x, coeffs }, &[x])
    }

    /// Reverse pass from a scalar `loss`. The tape is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::DoubleBackward);
        }
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(AutodiffError::NoRecordedGraph);
        };
        if node.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(node.value.shape()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            let value_of = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (value_of(*x), value_of(*w));
                    let (n, k, m) = (xv.rows, xv.cols, wv.cols);
                    if wants(*x) {
                        let dx = accumulate(&mut grads, *x, n, k);
                        gemm::gemm(n, m, k, &g.data, false, &wv.data, true, dx, 1.0);
                    }
                    if wants(*w) {
                        let dw = accumulate(&mut grads, *w, k, m);
                        gemm::gemm(k, n, m, &xv.data, true, &g.data, false, dw, 1.0);
                    }
                    if let Some(b) = b.filter(|b| wants(*b)) {
                        let db = accumulate(&mut grads, b, 1, m);
                        for row in g.data.chunks_exact(m) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if wants(v) {
                            add_into(accumulate(&mut grads, v, g.rows, g.cols), &g.data);
                        }
                    }
                }
                Op::Scale(x, factor) => {
                    if wants(*x) {
                        let dx = accumulate(&mut grads, *x, g.rows, g.cols);
                        for (d, v) in dx.iter_mut().zip(&g.data) {
                            *d += v * factor;
                        }
                    }
                }
                Op::Gelu { x, derivative } => {
                    if wants(*x) {
                        let dx = accumulate(&mut grads, *x, g.rows, g.cols);
                        for ((d, dv), gv) in dx.iter_mut().zip(derivative).zip(&g.data) {
                            *d += gv * dv;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let d = g.cols;
                    if wants(*gamma) {
                        let dg = accumulate(&mut grads, *gamma, 1, d);
                        for (grow, nrow) in g.data.chunks_exact(d).zip(normalized.chunks_exact(d)) {
                            for c in 0..d {
                                dg[c] += grow[c] * nrow[c];
                            }
                        }
                    }
                    if wants(*beta) {
                        let db = accumulate(&mut grads, *beta, 1, d);
                        for grow in g.data.chunks_exact(d) {
                            add_into(db, grow);
                        }
                    }
                    if wants(*x) {
                        let gv = value_of(*gamma).data.clone();
                        let dx = accumulate(&mut grads, *x, g.rows, d);
                        let mut dn = vec![0.0; d];
                        for r in 0..g.rows {
                            let grow = &g.data[r * d..(r + 1) * d];
                            let nrow = &normalized[r * d..(r + 1) * d];
                            let mut mean_dn = 0.0;
                            let mut mean_dn_n = 0.0;
                            for c in 0..d {
                                dn[c] = grow[c] * gv[c];
                                mean_dn += dn[c];
                                mean_dn_n += dn[c] * nrow[c];
                            }
                            mean_dn /= d as f64;
                            mean_dn_n /= d as f64;
                            let drow = &mut dx[r * d..(r + 1) * d];
                            for c in 0..d {
                                drow[c] += inv_std[r] * (dn[c] - mean_dn - nrow[c] * mean_dn_n);
                            }
                        }
                    }
                }
                Op::EmbedSum {
                    tables,
                    offsets,
                    lookups,
                } => {
                    let d = g.cols;
                    for (t, &table) in tables.iter().enumerate() {
                        if !wants(table) {
                            continue;
                        }
                        let rows = value_of(table).rows;
                        let dt = accumulate(&mut grads, table, rows, d);
                        for (out_row, window) in offsets.windows(2).enumerate() {
                            let grow = &g.data[out_row * d..(out_row + 1) * d];
                            for &(lt, lr) in &lookups[window[0]..window[1]] {
                                if lt == t {
                                    add_into(&mut dt[lr * d..(lr + 1) * d], grow);
                                }
                            }
                        }
                    }
                }
                Op::GatherRows { x, rows } => {
                    if wants(*x) {
                        let xv = value_of(*x);
                        let d = xv.cols;
                        let dx = accumulate(&mut grads, *x, xv.rows, d);
                        for (k, &r) in rows.iter().enumerate() {
                            add_into(&mut dx[r * d..(r + 1) * d], &g.data[k * d..(k + 1) * d]);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if wants(*x) {
                        let dx = accumulate(&mut grads, *x, g.rows, g.cols);
                        for ((d, v), m) in dx.iter_mut().zip(&g.data).zip(mask) {
                            *d += v * m;
                        }
                    }
                }
                Op::Attention {
                    qkv,
                    bias,
                    layout,
                    probs,
                } => {
                    let (qv, bv) = (value_of(*qkv), value_of(*bias));
                    let (dqkv, dbias) = attention::backward(qv, bv, layout, probs, &g);
                    if wants(*qkv) {
                        add_into(accumulate(&mut grads, *qkv, qv.rows, qv.cols), &dqkv);
                    }
                    if wants(*bias) {
                        add_into(accumulate(&mut grads, *bias, bv.rows, bv.cols), &dbias);
                    }
                }
                Op::Loss { x, grad } => {
                    if wants(*x) {
                        let xv = value_of(*x);
                        let upstream = g.data[0];
                        let dx = accumulate(&mut grads, *x, xv.rows, xv.cols);
                        for (d, v) in dx.iter_mut().zip(grad) {
                            *d += upstream * v;
                        }
                    }
                }
                Op::Sum(x) => {
                    if wants(*x) {
                        let xv = value_of(*x);
                        let upstream = g.data[0];
                        for d in accumulate(&mut grads, *x, xv.rows, xv.cols) {
                            *d += upstream;
                        }
                    }
                }
                Op::Dot { x, coeffs } => {
                    if wants(*x) {
                        let xv = value_of(*x);
                        let upstream = g.data[0];
                        let dx = accumulate(&mut grads, *x, xv.rows, xv.cols);
                        for (d, c) in dx.iter_mut().zip(coeffs) {
                            *d += upstream * c;
                        }
                    }
                }
            }
        }

        // Only leaves keep their gradients.
        for (node, grad) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *grad = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, rows: usize, cols: usize) -> &mut [f64] {
    grads[var.0]
        .get_or_insert_with(|| Tensor::zeros(rows, cols))
        .data
        .as_mut_slice()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
