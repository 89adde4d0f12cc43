use rayon::prelude::*;

use super::Tensor;

/// One diagonal block of an attention layout: `len` consecutive rows
/// starting at `start`, with a `len × len` matrix of bias buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub start: usize,
    pub len: usize,
    pub buckets: Vec<usize>,
}

/// Rows attend only within their own block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    blocks: Vec<Block>,
    rows: usize,
}

impl BlockLayout {
    /// Blocks must tile `0..rows` in order.
    pub fn new(blocks: Vec<Block>) -> Self {
        let mut next = 0;
        for b in &blocks {
            assert_eq!(b.start, next, "blocks must be contiguous");
            assert_eq!(b.buckets.len(), b.len * b.len, "bucket matrix size");
            next += b.len;
        }
        BlockLayout { blocks, rows: next }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

struct Dims {
    d: usize,
    heads: usize,
    head_dim: usize,
    scale: f64,
}

fn dims(qkv: &Tensor, bias: &Tensor, layout: &BlockLayout) -> Dims {
    assert_eq!(qkv.rows(), layout.rows(), "attention: layout rows");
    assert_eq!(qkv.cols() % 3, 0, "attention: qkv width");
    let d = qkv.cols() / 3;
    let heads = bias.cols();
    assert!(heads > 0 && d % heads == 0, "attention: heads must divide width");
    let head_dim = d / heads;
    Dims {
        d,
        heads,
        head_dim,
        scale: 1.0 / (head_dim as f64).sqrt(),
    }
}

fn check_buckets(block: &Block, bias: &Tensor) {
    assert!(
        block.buckets.iter().all(|&b| b < bias.rows()),
        "attention: bucket outside bias table"
    );
}

/// Returns the `[n, d]` output and the attention probabilities, laid out
/// block by block as `[heads, len, len]`.
pub(super) fn forward(qkv: &Tensor, bias: &Tensor, layout: &BlockLayout) -> (Tensor, Vec<f64>) {
    let dm = dims(qkv, bias, layout);
    let width = qkv.cols();
    let per_block: Vec<(Vec<f64>, Vec<f64>)> = layout
        .blocks
        .par_iter()
        .map(|block| {
            check_buckets(block, bias);
            let m = block.len;
            let rows = &qkv.data()[block.start * width..(block.start + m) * width];
            let mut out = vec![0.0; m * dm.d];
            let mut probs = vec![0.0; dm.heads * m * m];
            for h in 0..dm.heads {
                let (qo, ko, vo) = (h * dm.head_dim, dm.d + h * dm.head_dim, 2 * dm.d + h * dm.head_dim);
                let p = &mut probs[h * m * m..(h + 1) * m * m];
                for i in 0..m {
                    let q = &rows[i * width + qo..i * width + qo + dm.head_dim];
                    let prow = &mut p[i * m..(i + 1) * m];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..m {
                        let k = &rows[j * width + ko..j * width + ko + dm.head_dim];
                        let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * dm.scale
                            + bias.get(block.buckets[i * m + j], h);
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in prow.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    for s in prow.iter_mut() {
                        *s /= z;
                    }
                    let orow = &mut out[i * dm.d + qo..i * dm.d + qo + dm.head_dim];
                    for j in 0..m {
                        let v = &rows[j * width + vo..j * width + vo + dm.head_dim];
                        for (o, x) in orow.iter_mut().zip(v) {
                            *o += prow[j] * x;
                        }
                    }
                }
            }
            (out, probs)
        })
        .collect();

    let mut out = Vec::with_capacity(layout.rows * dm.d);
    let mut probs = Vec::new();
    for (o, p) in per_block {
        out.extend_from_slice(&o);
        probs.extend_from_slice(&p);
    }
    (Tensor::new(layout.rows, dm.d, out), probs)
}

/// Gradients with respect to `qkv` and `bias`. Bias partials are summed in
/// block order.
pub(super) fn backward(
    qkv: &Tensor,
    bias: &Tensor,
    layout: &BlockLayout,
    probs: &[f64],
    upstream: &Tensor,
) -> (Vec<f64>, Vec<f64>) {
    let dm = dims(qkv, bias, layout);
    let width = qkv.cols();
    let mut prob_offsets = Vec::with_capacity(layout.blocks.len());
    let mut offset = 0;
    for b in &layout.blocks {
        prob_offsets.push(offset);
        offset += dm.heads * b.len * b.len;
    }

    let per_block: Vec<(Vec<f64>, Vec<f64>)> = layout
        .blocks
        .par_iter()
        .zip(prob_offsets.par_iter())
        .map(|(block, &po)| {
            let m = block.len;
            let rows = &qkv.data()[block.start * width..(block.start + m) * width];
            let g = &upstream.data()[block.start * dm.d..(block.start + m) * dm.d];
            let mut dqkv = vec![0.0; m * width];
            let mut dbias = vec![0.0; bias.len()];
            let mut dp = vec![0.0; m];
            for h in 0..dm.heads {
                let (qo, ko, vo) = (h * dm.head_dim, dm.d + h * dm.head_dim, 2 * dm.d + h * dm.head_dim);
                let p = &probs[po + h * m * m..po + (h + 1) * m * m];
                for i in 0..m {
                    let gi = &g[i * dm.d + qo..i * dm.d + qo + dm.head_dim];
                    let prow = &p[i * m..(i + 1) * m];
                    let mut dot = 0.0;
                    for j in 0..m {
                        let v = &rows[j * width + vo..j * width + vo + dm.head_dim];
                        dp[j] = gi.iter().zip(v).map(|(a, b)| a * b).sum();
                        dot += prow[j] * dp[j];
                        let dv = &mut dqkv[j * width + vo..j * width + vo + dm.head_dim];
                        for (d, x) in dv.iter_mut().zip(gi) {
                            *d += prow[j] * x;
                        }
                    }
                    for j in 0..m {
                        let ds = prow[j] * (dp[j] - dot);
                        dbias[block.buckets[i * m + j] * dm.heads + h] += ds;
                        let ds = ds * dm.scale;
                        for c in 0..dm.head_dim {
                            let kj = rows[j * width + ko + c];
                            let qi = rows[i * width + qo + c];
                            dqkv[i * width + qo + c] += ds * kj;
                            dqkv[j * width + ko + c] += ds * qi;
                        }
                    }
                }
            }
            (dqkv, dbias)
        })
        .collect();

    let mut dqkv = Vec::with_capacity(qkv.len());
    let mut dbias = vec![0.0; bias.len()];
    for (dq, db) in per_block {
        dqkv.extend_from_slice(&dq);
        for (a, b) in dbias.iter_mut().zip(&db) {
            *a += b;
        }
    }
    (dqkv, dbias)
}
