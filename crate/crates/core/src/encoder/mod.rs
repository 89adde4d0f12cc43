//! A small Graphormer-style encoder built on [`crate::autodiff`].
//!
//! Each graph becomes a block of rows: a virtual node followed by its real
//! nodes. Node rows start as the sum of nine feature embeddings and a
//! degree-centrality embedding. Pre-LN transformer layers then attend
//! within each block, with a learned per-head bias looked up by clamped
//! shortest-path distance (virtual-node pairs use a bucket of their own).
//! A linear head over every node row predicts the element category and a
//! linear head over the virtual-node row predicts the graph scalar.

mod optim;

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Block, BlockLayout, Gradients, Lookup, Tape, Tensor, Var};
use crate::chem::{FEATURE_VOCAB_SIZES, NUM_FEATURES};
use crate::graph::FeaturizedGraph;
use crate::imbalance::{LossError, LossValue, Reduction};

pub use optim::{adam_step, AdamConfig, AdamState, OptimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Distances above this (and unreachable pairs) share the top bucket.
    pub max_spd_bucket: usize,
    /// Vocabulary size per node feature; the atomic-number table gets one
    /// extra row for the mask sentinel.
    pub feature_vocab_sizes: [usize; NUM_FEATURES],
    pub num_element_categories: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            max_spd_bucket: 8,
            feature_vocab_sizes: FEATURE_VOCAB_SIZES,
            num_element_categories: FEATURE_VOCAB_SIZES[0],
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |msg: &str| Err(EncoderError::InvalidConfig(msg.to_owned()));
        if self.hidden_dim == 0 || self.num_heads == 0 {
            return bad("hidden_dim and num_heads must be positive");
        }
        if self.hidden_dim % self.num_heads != 0 {
            return bad("hidden_dim must be divisible by num_heads");
        }
        if self.max_spd_bucket < 1 {
            return bad("max_spd_bucket must be at least 1");
        }
        if self.num_element_categories == 0 {
            return bad("num_element_categories must be positive");
        }
        if self.num_element_categories > self.feature_vocab_sizes[0] {
            return bad("num_element_categories exceeds the atomic-number vocabulary");
        }
        if self.feature_vocab_sizes.contains(&0) {
            return bad("feature vocabularies must be non-empty");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        Ok(())
    }

    /// Row of the atomic-number table that replaces masked nodes.
    pub fn mask_sentinel(&self) -> usize {
        self.feature_vocab_sizes[0]
    }

    /// Rows of the spatial bias table: distances `0..=max_spd_bucket`
    /// plus the virtual-node bucket.
    pub fn num_spatial_buckets(&self) -> usize {
        self.max_spd_bucket + 2
    }

    fn virtual_bucket(&self) -> usize {
        self.max_spd_bucket + 1
    }

    fn degree_rows(&self) -> usize {
        self.feature_vocab_sizes[2]
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, [usize; 2])> {
        let d = self.hidden_dim;
        let mut layout = Vec::new();
        for (f, &v) in self.feature_vocab_sizes.iter().enumerate() {
            let rows = if f == 0 { v + 1 } else { v };
            layout.push((format!("embed.feature{f}"), [rows, d]));
        }
        layout.push(("embed.degree".into(), [self.degree_rows(), d]));
        layout.push(("embed.virtual".into(), [1, d]));
        layout.push(("spatial_bias".into(), [self.num_spatial_buckets(), self.num_heads]));
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layout.push((p("ln1.gamma"), [1, d]));
            layout.push((p("ln1.beta"), [1, d]));
            layout.push((p("qkv.weight"), [d, 3 * d]));
            layout.push((p("qkv.bias"), [1, 3 * d]));
            layout.push((p("out.weight"), [d, d]));
            layout.push((p("out.bias"), [1, d]));
            layout.push((p("ln2.gamma"), [1, d]));
            layout.push((p("ln2.beta"), [1, d]));
            layout.push((p("ffn1.weight"), [d, d]));
            layout.push((p("ffn1.bias"), [1, d]));
            layout.push((p("ffn2.weight"), [d, d]));
            layout.push((p("ffn2.bias"), [1, d]));
        }
        layout.push(("final_ln.gamma".into(), [1, d]));
        layout.push(("final_ln.beta".into(), [1, d]));
        layout.push(("node_head.weight".into(), [d, self.num_element_categories]));
        layout.push(("node_head.bias".into(), [1, self.num_element_categories]));
        layout.push(("graph_head.weight".into(), [d, 1]));
        layout.push(("graph_head.bias".into(), [1, 1]));
        layout
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_layout().iter().map(|(_, [r, c])| r * c).sum()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("graph {graph}: masked node {node} is out of range")]
    IndexOutOfRange { graph: usize, node: usize },
    #[error("graph {graph} node {node}: feature {feature} value {value} exceeds its vocabulary")]
    VocabOverflow {
        graph: usize,
        node: usize,
        feature: usize,
        value: usize,
    },
    #[error("parameters do not match the config: {0}")]
    ParameterMismatch(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParameters {
    /// Seeded initialization: weight matrices and embeddings uniform in
    /// `±1/sqrt(fan_in)`, biases and the spatial bias zero, layer-norm
    /// gains one.
    pub fn init(config: &EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (names, tensors) = config
            .parameter_layout()
            .into_iter()
            .map(|(name, [rows, cols])| {
                let tensor = if name.ends_with(".gamma") {
                    Tensor::filled(rows, cols, 1.0)
                } else if name.ends_with(".beta") || name.ends_with(".bias") || name == "spatial_bias" {
                    Tensor::zeros(rows, cols)
                } else {
                    let fan_in = if name.starts_with("embed.") { cols } else { rows };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(rows, cols, data)
                };
                (name, tensor)
            })
            .unzip();
        Ok(ModelParameters { names, tensors })
    }

    pub fn from_parts(
        config: &EncoderConfig,
        names: Vec<String>,
        tensors: Vec<Tensor>,
    ) -> Result<Self, EncoderError> {
        let layout = config.parameter_layout();
        if layout.len() != names.len() || names.len() != tensors.len() {
            return Err(EncoderError::ParameterMismatch(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((want, shape), (name, t)) in layout.iter().zip(names.iter().zip(&tensors)) {
            if want != name || *shape != t.shape() {
                return Err(EncoderError::ParameterMismatch(format!(
                    "expected {want} {shape:?}, got {name} {:?}",
                    t.shape()
                )));
            }
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(EncoderError::ParameterMismatch(format!("{name} is not finite")));
            }
        }
        Ok(ModelParameters { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// All-pairs hop counts by BFS. Unreachable pairs and distances above
/// `max_bucket` are reported as `max_bucket`.
pub fn shortest_path_distances(adjacency: &[Vec<usize>], max_bucket: usize) -> Vec<Vec<usize>> {
    let n = adjacency.len();
    let mut out = vec![vec![max_bucket; n]; n];
    let mut queue = VecDeque::new();
    for (source, row) in out.iter_mut().enumerate() {
        let mut dist = vec![usize::MAX; n];
        dist[source] = 0;
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            for &v in &adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for (cell, d) in row.iter_mut().zip(dist) {
            *cell = d.min(max_bucket);
        }
    }
    out
}

/// A graph with its attention bucket matrix precomputed. Row 0 of the
/// block is the virtual node.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGraph {
    graph: FeaturizedGraph,
    buckets: Vec<usize>,
}

impl PreparedGraph {
    pub fn new(graph: FeaturizedGraph, config: &EncoderConfig) -> Self {
        let n = graph.num_nodes();
        let m = n + 1;
        let spd = shortest_path_distances(graph.adjacency(), config.max_spd_bucket);
        let mut buckets = vec![config.virtual_bucket(); m * m];
        for i in 0..n {
            for j in 0..n {
                buckets[(i + 1) * m + j + 1] = spd[i][j];
            }
        }
        PreparedGraph { graph, buckets }
    }

    pub fn graph(&self) -> &FeaturizedGraph {
        &self.graph
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from this seed.
    Train { dropout_seed: u64 },
    Eval,
}

/// A recorded forward pass. Consumed by [`ForwardPass::backward`].
pub struct ForwardPass {
    tape: Tape,
    params: Vec<Var>,
    /// `[real nodes, K]`, all graphs concatenated in batch order.
    pub node_logits: Var,
    /// `[masked nodes, K]` in batch order, then ascending mask order.
    pub masked_logits: Var,
    /// Original categories of the masked nodes, aligned with `masked_logits`.
    pub masked_labels: Vec<usize>,
    /// `[graphs, 1]`.
    pub graph_predictions: Var,
}

impl ForwardPass {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.tape.value(var)
    }

    pub fn cross_entropy(
        &mut self,
        weights: &[f64],
        reduction: Reduction,
    ) -> Result<(Var, LossValue), EncoderError> {
        Ok(self
            .tape
            .cross_entropy(self.masked_logits, &self.masked_labels, weights, reduction)?)
    }

    pub fn mae(&mut self, targets: &[f64]) -> Result<(Var, LossValue), EncoderError> {
        Ok(self.tape.mae(self.graph_predictions, targets)?)
    }

    /// Gradients for every parameter, in [`ModelParameters`] order. Parameters
    /// the loss does not reach get zero tensors.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Tensor>, EncoderError> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        Ok(self
            .params
            .iter()
            .map(|&p| {
                grads.take(p).unwrap_or_else(|| {
                    let v = self.tape.value(p);
                    Tensor::zeros(v.rows(), v.cols())
                })
            })
            .collect())
    }
}

pub struct Encoder {
    config: EncoderConfig,
    params: ModelParameters,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self, EncoderError> {
        let params = ModelParameters::init(&config)?;
        Ok(Encoder { config, params })
    }

    pub fn with_parameters(config: EncoderConfig, params: ModelParameters) -> Result<Self, EncoderError> {
        config.validate()?;
        let params = ModelParameters::from_parts(&config, params.names, params.tensors)?;
        Ok(Encoder { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn parameters(&self) -> &ModelParameters {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut ModelParameters {
        &mut self.params
    }

    pub fn into_parameters(self) -> ModelParameters {
        self.params
    }

    pub fn prepare(&self, graph: FeaturizedGraph) -> PreparedGraph {
        PreparedGraph::new(graph, &self.config)
    }

    /// Records a forward pass over `graphs`. `masks[g]` lists the masked
    /// nodes of graph `g`; their atomic-number feature is replaced by the
    /// mask sentinel before embedding.
    pub fn forward(
        &self,
        graphs: &[&PreparedGraph],
        masks: &[Vec<usize>],
        mode: Mode,
    ) -> Result<ForwardPass, EncoderError> {
        let cfg = &self.config;
        assert_eq!(graphs.len(), masks.len(), "one mask list per graph");
        let sentinel = cfg.mask_sentinel();
        let (degree_table, virtual_table) = (NUM_FEATURES, NUM_FEATURES + 1);

        let mut lookups: Vec<Vec<Lookup>> = Vec::new();
        let mut blocks = Vec::with_capacity(graphs.len());
        let mut node_rows = Vec::new();
        let mut virtual_rows = Vec::with_capacity(graphs.len());
        let mut masked_nodes = Vec::new();
        let mut masked_labels = Vec::new();
        for (g, (prepared, mask)) in graphs.iter().zip(masks).enumerate() {
            let graph = &prepared.graph;
            let n = graph.num_nodes();
            let start = lookups.len();
            let node_base = node_rows.len();
            blocks.push(Block {
                start,
                len: n + 1,
                buckets: prepared.buckets.clone(),
            });
            virtual_rows.push(start);
            lookups.push(vec![(virtual_table, 0)]);
            let mut is_masked = vec![false; n];
            for &node in mask {
                if node >= n {
                    return Err(EncoderError::IndexOutOfRange { graph: g, node });
                }
                is_masked[node] = true;
            }
            for (node, features) in graph.features().iter().enumerate() {
                let values = features.as_array();
                let mut row = Vec::with_capacity(NUM_FEATURES + 1);
                for (f, &value) in values.iter().enumerate() {
                    if value >= cfg.feature_vocab_sizes[f] || (f == 0 && value >= cfg.num_element_categories) {
                        return Err(EncoderError::VocabOverflow {
                            graph: g,
                            node,
                            feature: f,
                            value,
                        });
                    }
                    let value = if f == 0 && is_masked[node] { sentinel } else { value };
                    row.push((f, value));
                }
                row.push((degree_table, graph.degree(node).min(cfg.degree_rows() - 1)));
                node_rows.push(lookups.len());
                lookups.push(row);
            }
            let mut sorted = mask.clone();
            sorted.sort_unstable();
            sorted.dedup();
            for node in sorted {
                masked_nodes.push(node_base + node);
                masked_labels.push(graph.category(node));
            }
        }
        let layout = Arc::new(BlockLayout::new(blocks));

        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.tensors.iter().map(|t| tape.param(t.clone())).collect();
        let mut next = 0;
        let mut take = || {
            next += 1;
            params[next - 1]
        };

        let tables: Vec<Var> = (0..NUM_FEATURES + 2).map(|_| take()).collect();
        let spatial = take();
        let mut x = tape.embed_sum(&tables, &lookups);

        let mut dropout_rng = match mode {
            Mode::Train { dropout_seed } if cfg.dropout_rate > 0.0 => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            _ => None,
        };
        let mut dropout = |tape: &mut Tape, v: Var| match dropout_rng.as_mut() {
            Some(rng) => {
                let keep = 1.0 - cfg.dropout_rate;
                let mask = (0..tape.value(v).len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                tape.dropout(v, mask)
            }
            None => v,
        };

        for _ in 0..cfg.num_layers {
            let (g1, b1, wqkv, bqkv, wo, bo) = (take(), take(), take(), take(), take(), take());
            let (g2, b2, w1, c1, w2, c2) = (take(), take(), take(), take(), take(), take());
            let a = tape.layer_norm(x, g1, b1);
            let qkv = tape.linear(a, wqkv, Some(bqkv));
            let att = tape.block_attention(qkv, spatial, layout.clone());
            let o = tape.linear(att, wo, Some(bo));
            let o = dropout(&mut tape, o);
            x = tape.add(x, o);
            let b = tape.layer_norm(x, g2, b2);
            let f = tape.linear(b, w1, Some(c1));
            let f = tape.gelu(f);
            let f = tape.linear(f, w2, Some(c2));
            let f = dropout(&mut tape, f);
            x = tape.add(x, f);
        }
        let (gf, bf) = (take(), take());
        let h = tape.layer_norm(x, gf, bf);
        let (wn, bn, wg, bg) = (take(), take(), take(), take());

        let nodes = tape.gather_rows(h, &node_rows);
        let node_logits = tape.linear(nodes, wn, Some(bn));
        let masked_logits = tape.gather_rows(node_logits, &masked_nodes);
        let readout = tape.gather_rows(h, &virtual_rows);
        let graph_predictions = tape.linear(readout, wg, Some(bg));

        Ok(ForwardPass {
            tape,
            params,
            node_logits,
            masked_logits,
            masked_labels,
            graph_predictions,
        })
    }

    /// Graph-level predictions without dropout.
    pub fn predict_graphs(&self, graphs: &[&PreparedGraph]) -> Result<Vec<f64>, EncoderError> {
        let masks = vec![Vec::new(); graphs.len()];
        let pass = self.forward(graphs, &masks, Mode::Eval)?;
        Ok(pass.value(pass.graph_predictions).data().to_vec())
    }
}
