//! Pretext recall by category and frequency group, convergence epochs, and
//! report files.

mod report;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use report::{emit_report, read_report_json, Report, ReportFormat, SchemeLoss, SchemeRecall};

use crate::dataset::CategorySpace;
use crate::encoder::{Encoder, EncoderError, Mode, PreparedGraph};
use crate::pipeline::{select_mask, LossLog, MaskMode};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("graph {0} has no nodes")]
    EmptyGraph(usize),
    #[error("invalid group spec: {0}")]
    InvalidGroups(String),
    #[error("predictor returned {got} predictions for graph {graph}, expected {expected}")]
    PredictionCount { graph: usize, got: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] EncoderError),
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Named, disjoint groups of categories. Categories outside every group
/// fall into an implicit `other` group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    groups: Vec<(String, Vec<usize>)>,
}

pub const OTHER_GROUP: &str = "other";

impl GroupSpec {
    pub fn new(groups: Vec<(String, Vec<usize>)>) -> Result<Self, MetricsError> {
        let mut seen = BTreeSet::new();
        let mut names = BTreeSet::new();
        for (name, members) in &groups {
            if name == OTHER_GROUP || !names.insert(name.as_str()) {
                return Err(MetricsError::InvalidGroups(format!("duplicate or reserved group name {name:?}")));
            }
            for &c in members {
                if !seen.insert(c) {
                    return Err(MetricsError::InvalidGroups(format!("category {c} appears in two groups")));
                }
            }
        }
        Ok(GroupSpec { groups })
    }

    /// C / O,N / F,S,Cl / Si,P,Br,B,Se over element categories.
    pub fn elements() -> Self {
        let group = |name: &str, atomic_numbers: &[usize]| {
            (name.to_owned(), atomic_numbers.iter().map(|z| z - 1).collect())
        };
        GroupSpec::new(vec![
            group("C", &[6]),
            group("O,N", &[8, 7]),
            group("F,S,Cl", &[9, 16, 17]),
            group("Si,P,Br,B,Se", &[14, 15, 35, 5, 34]),
        ])
        .expect("default element groups are disjoint")
    }

    /// Groups of abstract categories by rank: `sizes[i]` consecutive
    /// categories per group, starting from category 0.
    pub fn ranked(space: CategorySpace, sizes: &[usize]) -> Result<Self, MetricsError> {
        let mut next = 0;
        let mut groups = Vec::with_capacity(sizes.len());
        for &size in sizes {
            let members: Vec<usize> = (next..next + size).collect();
            let name = members.iter().map(|&c| space.name(c)).collect::<Vec<_>>().join(",");
            groups.push((name, members));
            next += size;
        }
        if next > space.num_categories() {
            return Err(MetricsError::InvalidGroups(format!(
                "groups cover {next} categories, space has {}",
                space.num_categories()
            )));
        }
        GroupSpec::new(groups)
    }

    /// Element groups for element data, four rank groups otherwise.
    pub fn default_for(space: CategorySpace) -> Self {
        match space {
            CategorySpace::Elements => GroupSpec::elements(),
            CategorySpace::Abstract { num_categories } => {
                let k = num_categories;
                let sizes: Vec<usize> = match k {
                    0 => vec![],
                    1..=4 => vec![1; k],
                    _ => vec![1, 1, 1, k - 3],
                };
                GroupSpec::ranked(space, &sizes).expect("sizes sum to the space")
            }
        }
    }

    pub fn groups(&self) -> &[(String, Vec<usize>)] {
        &self.groups
    }

    pub fn group_of(&self, category: usize) -> Option<usize> {
        self.groups.iter().position(|(_, members)| members.contains(&category))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub name: String,
    /// Nodes of these categories in the evaluated split, masked or not.
    pub node_count: u64,
    pub masked_count: u64,
    pub correct_count: u64,
    /// `None` when nothing was masked.
    pub recall: Option<f64>,
}

impl RecallEntry {
    fn new(name: String, node_count: u64, masked_count: u64, correct_count: u64) -> Self {
        let recall = (masked_count > 0).then(|| correct_count as f64 / masked_count as f64);
        RecallEntry {
            name,
            node_count,
            masked_count,
            correct_count,
            recall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub mask_mode: MaskMode,
    pub per_category: Vec<RecallEntry>,
    /// Configured groups in order, then `other` if any category is left over.
    pub per_group: Vec<RecallEntry>,
    pub overall: RecallEntry,
}

impl RecallReport {
    /// Aggregates per-category tallies; `counts[c] = (nodes, masked, correct)`.
    pub fn from_tallies(space: CategorySpace, mask_mode: MaskMode, groups: &GroupSpec, counts: &[(u64, u64, u64)]) -> Self {
        let per_category: Vec<RecallEntry> = counts
            .iter()
            .enumerate()
            .map(|(c, &(n, m, k))| RecallEntry::new(space.name(c), n, m, k))
            .collect();
        let sum = |members: &mut dyn Iterator<Item = usize>| {
            members.fold((0, 0, 0), |(n, m, k), c| {
                let (cn, cm, ck) = counts.get(c).copied().unwrap_or_default();
                (n + cn, m + cm, k + ck)
            })
        };
        let mut per_group: Vec<RecallEntry> = groups
            .groups()
            .iter()
            .map(|(name, members)| {
                let (n, m, k) = sum(&mut members.iter().copied());
                RecallEntry::new(name.clone(), n, m, k)
            })
            .collect();
        let leftover: Vec<usize> = (0..counts.len()).filter(|&c| groups.group_of(c).is_none()).collect();
        if !leftover.is_empty() {
            let (n, m, k) = sum(&mut leftover.into_iter());
            per_group.push(RecallEntry::new(OTHER_GROUP.to_owned(), n, m, k));
        }
        let (n, m, k) = sum(&mut (0..counts.len()));
        RecallReport {
            mask_mode,
            per_category,
            per_group,
            overall: RecallEntry::new("overall".to_owned(), n, m, k),
        }
    }

    /// The last configured group, i.e. the rarest one when groups are listed
    /// by decreasing frequency.
    pub fn rarest_group(&self) -> Option<&RecallEntry> {
        self.per_group.iter().rfind(|g| g.name != OTHER_GROUP)
    }

    pub fn most_frequent_group(&self) -> Option<&RecallEntry> {
        self.per_group.first().filter(|g| g.name != OTHER_GROUP)
    }
}

/// Predicts the category of each masked node.
pub trait NodePredictor {
    fn predict_masked(&self, graphs: &[&PreparedGraph], masks: &[Vec<usize>]) -> Result<Vec<Vec<usize>>, EncoderError>;
}

impl NodePredictor for Encoder {
    fn predict_masked(&self, graphs: &[&PreparedGraph], masks: &[Vec<usize>]) -> Result<Vec<Vec<usize>>, EncoderError> {
        let pass = self.forward(graphs, masks, Mode::Eval)?;
        let logits = pass.value(pass.masked_logits);
        let mut rows = (0..logits.rows()).map(|r| argmax(logits.row(r)));
        Ok(masks
            .iter()
            .map(|m| rows.by_ref().take(m.len()).collect())
            .collect())
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 64;

/// Masks every graph once with `mask_mode` on its own seed stream and
/// tallies argmax predictions against the true categories.
pub fn evaluate_recall<P: NodePredictor + ?Sized>(
    model: &P,
    graphs: &[PreparedGraph],
    space: CategorySpace,
    mask_mode: MaskMode,
    groups: &GroupSpec,
    seed: u64,
) -> Result<RecallReport, MetricsError> {
    if graphs.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = graphs
        .iter()
        .enumerate()
        .map(|(i, g)| select_mask(g.graph(), mask_mode, &mut rng).map_err(|_| MetricsError::EmptyGraph(i)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut counts = vec![(0u64, 0u64, 0u64); space.num_categories()];
    for (batch_index, (chunk, chunk_masks)) in graphs.chunks(EVAL_BATCH).zip(masks.chunks(EVAL_BATCH)).enumerate() {
        let refs: Vec<&PreparedGraph> = chunk.iter().collect();
        let predictions = model.predict_masked(&refs, chunk_masks)?;
        if predictions.len() != chunk.len() {
            return Err(MetricsError::PredictionCount {
                graph: batch_index * EVAL_BATCH,
                got: predictions.len(),
                expected: chunk.len(),
            });
        }
        for (offset, ((graph, mask), predicted)) in chunk.iter().zip(chunk_masks).zip(&predictions).enumerate() {
            if predicted.len() != mask.len() {
                return Err(MetricsError::PredictionCount {
                    graph: batch_index * EVAL_BATCH + offset,
                    got: predicted.len(),
                    expected: mask.len(),
                });
            }
            let graph = graph.graph();
            for node in 0..graph.num_nodes() {
                counts[graph.category(node)].0 += 1;
            }
            for (&node, &p) in mask.iter().zip(predicted) {
                let truth = graph.category(node);
                counts[truth].1 += 1;
                if p == truth {
                    counts[truth].2 += 1;
                }
            }
        }
    }
    Ok(RecallReport::from_tallies(space, mask_mode, groups, &counts))
}

/// Overall recall equals the masked-count-weighted mean of group recalls,
/// and overall tallies equal the per-category sums.
pub fn overall_consistency_check(report: &RecallReport) -> bool {
    let masked: u64 = report.per_category.iter().map(|e| e.masked_count).sum();
    let correct: u64 = report.per_category.iter().map(|e| e.correct_count).sum();
    if masked != report.overall.masked_count || correct != report.overall.correct_count {
        return false;
    }
    let group_masked: u64 = report.per_group.iter().map(|e| e.masked_count).sum();
    if group_masked != masked {
        return false;
    }
    let weighted: f64 = report
        .per_group
        .iter()
        .filter_map(|e| e.recall.map(|r| e.masked_count as f64 * r))
        .sum();
    match report.overall.recall {
        None => masked == 0,
        Some(overall) => masked > 0 && (overall - weighted / masked as f64).abs() <= 1e-12,
    }
}

/// First 1-based epoch whose training loss is strictly below `threshold`.
pub fn convergence_epoch(log: &LossLog, threshold: f64) -> Option<usize> {
    log.entries().iter().find(|e| e.train_loss < threshold).map(|e| e.epoch)
}
