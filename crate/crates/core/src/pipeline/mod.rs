//! Masked-node pre-training, fine-tuning, checkpoints and the experiment
//! grid.

mod checkpoint;
mod grid;

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use grid::{cell_file_name, cell_seeds, run_experiment_grid, run_grid_prepared, GridCell, GridConfig, GridReport};

use crate::dataset::{CategorySpace, CategoryStats, Dataset, DatasetError};
use crate::encoder::{
    adam_step, AdamConfig, AdamState, Encoder, EncoderConfig, EncoderError, Mode, ModelParameters, OptimError,
    PreparedGraph,
};
use crate::graph::FeaturizedGraph;
use crate::imbalance::{compute_weights, LossError, Reduction, WeightScheme, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    FixedCount(usize),
    Proportion(f64),
}

impl MaskMode {
    /// How many of `n` nodes get masked.
    pub fn count(self, n: usize) -> usize {
        match self {
            MaskMode::FixedCount(k) => k.min(n),
            MaskMode::Proportion(p) => ((p * n as f64).round() as usize).clamp(1, n),
        }
    }

    /// Short row label, e.g. `1 node` or `15%`.
    pub fn label(self) -> String {
        match self {
            MaskMode::FixedCount(1) => "1 node".to_owned(),
            MaskMode::FixedCount(k) => format!("{k} nodes"),
            MaskMode::Proportion(p) => format!("{}%", p * 100.0),
        }
    }

    /// The five modes of the standard grid.
    pub fn standard_grid() -> Vec<MaskMode> {
        vec![
            MaskMode::FixedCount(1),
            MaskMode::Proportion(0.15),
            MaskMode::Proportion(0.30),
            MaskMode::Proportion(0.50),
            MaskMode::Proportion(0.80),
        ]
    }

    fn validate(self) -> Result<(), PipelineError> {
        match self {
            MaskMode::FixedCount(0) => Err(PipelineError::InvalidConfig("fixed_count must be at least 1".into())),
            MaskMode::Proportion(p) if !(p > 0.0 && p <= 1.0) => {
                Err(PipelineError::InvalidConfig(format!("mask proportion {p} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskMode::FixedCount(k) => write!(f, "fixed_count_{k}"),
            MaskMode::Proportion(p) => write!(f, "proportion_{p}"),
        }
    }
}

/// Masked node indices for each graph of a batch, with the original
/// categories of those nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub mode: MaskMode,
    pub masked: Vec<Vec<usize>>,
    pub labels: Vec<Vec<usize>>,
}

impl MaskPlan {
    pub fn draw<R: Rng>(graphs: &[&FeaturizedGraph], mode: MaskMode, rng: &mut R) -> Result<Self, PipelineError> {
        let mut masked = Vec::with_capacity(graphs.len());
        let mut labels = Vec::with_capacity(graphs.len());
        for graph in graphs {
            let nodes = select_mask(graph, mode, rng)?;
            labels.push(nodes.iter().map(|&n| graph.category(n)).collect());
            masked.push(nodes);
        }
        Ok(MaskPlan { mode, masked, labels })
    }

    pub fn total_masked(&self) -> usize {
        self.masked.iter().map(Vec::len).sum()
    }
}

/// Distinct uniformly chosen nodes, sorted ascending.
pub fn select_mask<R: Rng>(graph: &FeaturizedGraph, mode: MaskMode, rng: &mut R) -> Result<Vec<usize>, PipelineError> {
    let n = graph.num_nodes();
    if n == 0 {
        return Err(PipelineError::EmptyGraph);
    }
    let mut nodes = rand::seq::index::sample(rng, n, mode.count(n)).into_vec();
    nodes.sort_unstable();
    Ok(nodes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub mask: u64,
    pub dropout: u64,
}

impl Seeds {
    /// Four distinct streams derived from one number.
    pub fn from_base(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Seeds {
            init: rng.random(),
            shuffle: rng.random(),
            mask: rng.random(),
            dropout: rng.random(),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::from_base(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: WeightScheme,
    pub mask_mode: MaskMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Constant learning rate and Adam moments.
    pub optimizer: AdamConfig,
    pub seeds: Seeds,
    pub validation_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: WeightScheme::NoWeight,
            mask_mode: MaskMode::FixedCount(1),
            epochs: 100,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            seeds: Seeds::default(),
            validation_interval: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.epochs == 0 {
            return Err(PipelineError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.validation_interval == 0 {
            return Err(PipelineError::InvalidConfig("validation_interval must be at least 1".into()));
        }
        if self.optimizer.learning_rate.is_nan() || self.optimizer.learning_rate <= 0.0 {
            return Err(PipelineError::InvalidConfig("learning_rate must be positive".into()));
        }
        self.mask_mode.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Option<f64>,
}

/// Per-epoch losses; epochs are 1-based and strictly increasing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    entries: Vec<LossEntry>,
}

impl LossLog {
    pub fn from_losses(losses: &[f64]) -> Self {
        LossLog {
            entries: losses
                .iter()
                .enumerate()
                .map(|(i, &train_loss)| LossEntry {
                    epoch: i + 1,
                    train_loss,
                    validation: None,
                })
                .collect(),
        }
    }

    pub fn push(&mut self, entry: LossEntry) {
        if let Some(last) = self.entries.last() {
            assert!(entry.epoch > last.epoch, "loss log epochs must increase");
        }
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LossEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.train_loss).collect()
    }

    pub fn min_validation(&self) -> Option<f64> {
        self.entries.iter().filter_map(|e| e.validation).reduce(f64::min)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("validation split is empty")]
    EmptyValidationSplit,
    #[error("record {0} has no target")]
    MissingTargets(usize),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset has {space} categories but the node head has {head}")]
    CategoryMismatch { space: usize, head: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Optimizer(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("recall evaluation failed: {0}")]
    Recall(String),
}

/// Featurized and prepared train/validation graphs with their targets.
pub struct TrainingData {
    pub space: CategorySpace,
    pub train: Vec<PreparedGraph>,
    pub train_targets: Vec<Option<f64>>,
    pub validation: Vec<PreparedGraph>,
    pub validation_targets: Vec<Option<f64>>,
}

impl TrainingData {
    pub fn new(dataset: &Dataset, config: &EncoderConfig) -> Result<Self, PipelineError> {
        let mut graphs: Vec<Option<FeaturizedGraph>> = dataset.featurize()?.into_iter().map(Some).collect();
        let mut take = |indices: Vec<usize>| {
            let prepared = indices
                .iter()
                .map(|&i| PreparedGraph::new(graphs[i].take().expect("index used once"), config))
                .collect::<Vec<_>>();
            let targets = indices.iter().map(|&i| dataset.records[i].target).collect();
            (prepared, targets)
        };
        let (train, train_targets) = take(dataset.train_indices());
        let (validation, validation_targets) = take(dataset.validation_indices());
        Ok(TrainingData {
            space: dataset.space,
            train,
            train_targets,
            validation,
            validation_targets,
        })
    }

    pub fn train_stats(&self) -> CategoryStats {
        CategoryStats::from_graphs(self.space, self.train.iter().map(PreparedGraph::graph))
    }
}

pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub loss_log: LossLog,
}

/// The encoder config a run actually uses: parameter init follows the
/// run's init seed.
fn seeded(config: &EncoderConfig, train: &TrainConfig) -> EncoderConfig {
    EncoderConfig {
        seed: train.seeds.init,
        ..config.clone()
    }
}

fn check_head(space: CategorySpace, config: &EncoderConfig) -> Result<(), PipelineError> {
    if space.num_categories() != config.num_element_categories {
        return Err(PipelineError::CategoryMismatch {
            space: space.num_categories(),
            head: config.num_element_categories,
        });
    }
    Ok(())
}

fn dropout_seed(train: &TrainConfig, step: u64) -> u64 {
    train.seeds.dropout.wrapping_add(step.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn non_finite(epoch: usize) -> impl Fn(EncoderError) -> PipelineError {
    move |e| match e {
        EncoderError::Loss(LossError::NonFiniteInput(_)) => PipelineError::NonFiniteLoss { epoch },
        other => PipelineError::Encoder(other),
    }
}

pub fn pretrain(dataset: &Dataset, encoder: &EncoderConfig, train: &TrainConfig) -> Result<PretrainRun, PipelineError> {
    let data = TrainingData::new(dataset, encoder)?;
    pretrain_prepared(&data, encoder, train)
}

/// Masked-node pre-training with weights frozen from the training split.
pub fn pretrain_prepared(
    data: &TrainingData,
    encoder: &EncoderConfig,
    train: &TrainConfig,
) -> Result<PretrainRun, PipelineError> {
    if data.train.is_empty() {
        return Err(PipelineError::EmptyTrainSplit);
    }
    let weights = compute_weights(&data.train_stats(), train.scheme);
    pretrain_with_weights(data, encoder, train, weights)
}

/// Pre-training with an explicit weight vector in place of the scheme's.
pub fn pretrain_with_weights(
    data: &TrainingData,
    encoder: &EncoderConfig,
    train: &TrainConfig,
    weights: WeightVector,
) -> Result<PretrainRun, PipelineError> {
    train.validate()?;
    let config = seeded(encoder, train);
    check_head(data.space, &config)?;
    if data.train.is_empty() {
        return Err(PipelineError::EmptyTrainSplit);
    }
    if weights.weights.len() != config.num_element_categories {
        return Err(PipelineError::CategoryMismatch {
            space: weights.weights.len(),
            head: config.num_element_categories,
        });
    }
    let mut model = Encoder::new(config.clone())?;
    let mut adam = AdamState::new(model.parameters().tensors());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train.seeds.shuffle);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(train.seeds.mask);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = LossLog::default();
    let mut step = 0u64;

    for epoch in 1..=train.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut weighted_sum, mut weight_total) = (0.0, 0.0);
        for batch in order.chunks(train.batch_size) {
            let graphs: Vec<&PreparedGraph> = batch.iter().map(|&i| &data.train[i]).collect();
            let plain: Vec<&FeaturizedGraph> = graphs.iter().map(|g| g.graph()).collect();
            let plan = MaskPlan::draw(&plain, train.mask_mode, &mut mask_rng)?;
            let mut pass = model.forward(
                &graphs,
                &plan.masked,
                Mode::Train {
                    dropout_seed: dropout_seed(train, step),
                },
            )?;
            let (loss, value) = pass
                .cross_entropy(&weights.weights, Reduction::Mean)
                .map_err(non_finite(epoch))?;
            if !value.value.is_finite() {
                return Err(PipelineError::NonFiniteLoss { epoch });
            }
            weighted_sum += value.contributions.iter().sum::<f64>();
            weight_total += value.normalizer;
            let grads = pass.backward(loss)?;
            adam_step(model.parameters_mut().tensors_mut(), &grads, &train.optimizer, &mut adam)?;
            step += 1;
        }
        let train_loss = if weight_total > 0.0 { weighted_sum / weight_total } else { 0.0 };
        if !train_loss.is_finite() || !model.parameters().is_finite() {
            return Err(PipelineError::NonFiniteLoss { epoch });
        }
        log::debug!("pretrain {} epoch {epoch}: loss {train_loss:.6}", train.scheme);
        log.push(LossEntry {
            epoch,
            train_loss,
            validation: None,
        });
    }

    let checkpoint = Checkpoint::new(config, model.into_parameters(), weights, train.clone(), log.clone());
    Ok(PretrainRun {
        checkpoint,
        loss_log: log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitProvenance {
    NoPretraining,
    Checkpoint,
}

impl fmt::Display for InitProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitProvenance::NoPretraining => "no_pretraining",
            InitProvenance::Checkpoint => "checkpoint",
        })
    }
}

pub enum FinetuneInit<'a> {
    Fresh,
    Checkpoint(&'a Checkpoint),
}

pub struct FinetuneRun {
    pub encoder: EncoderConfig,
    pub parameters: ModelParameters,
    /// Training MAE per epoch, validation MAE at the configured interval.
    pub loss_log: LossLog,
    pub min_validation_mae: f64,
    /// Validation MAE of the starting parameters.
    pub initial_validation_mae: f64,
    pub init: InitProvenance,
}

impl FinetuneRun {
    pub fn to_checkpoint(&self, train: &TrainConfig) -> Checkpoint {
        Checkpoint::new(
            self.encoder.clone(),
            self.parameters.clone(),
            WeightVector::ones(self.encoder.num_element_categories),
            train.clone(),
            self.loss_log.clone(),
        )
    }
}

pub fn finetune(
    init: FinetuneInit<'_>,
    dataset: &Dataset,
    encoder: &EncoderConfig,
    train: &TrainConfig,
) -> Result<FinetuneRun, PipelineError> {
    let config = match init {
        FinetuneInit::Checkpoint(c) => &c.encoder,
        FinetuneInit::Fresh => encoder,
    };
    let data = TrainingData::new(dataset, config)?;
    finetune_prepared(init, &data, encoder, train)
}

fn require_targets(targets: &[Option<f64>], offset: usize) -> Result<Vec<f64>, PipelineError> {
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| t.ok_or(PipelineError::MissingTargets(offset + i)))
        .collect()
}

/// Mean absolute error of graph predictions, evaluated without dropout.
pub fn evaluate_mae(model: &Encoder, graphs: &[PreparedGraph], targets: &[f64], batch_size: usize) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    for (chunk, t) in graphs.chunks(batch_size).zip(targets.chunks(batch_size)) {
        let refs: Vec<&PreparedGraph> = chunk.iter().collect();
        let predictions = model.predict_graphs(&refs)?;
        total += predictions.iter().zip(t).map(|(p, y)| (p - y).abs()).sum::<f64>();
    }
    Ok(total / graphs.len() as f64)
}

/// Full-model MAE training of the regression head and encoder.
pub fn finetune_prepared(
    init: FinetuneInit<'_>,
    data: &TrainingData,
    encoder: &EncoderConfig,
    train: &TrainConfig,
) -> Result<FinetuneRun, PipelineError> {
    train.validate()?;
    let (mut model, provenance) = match init {
        FinetuneInit::Fresh => (Encoder::new(seeded(encoder, train))?, InitProvenance::NoPretraining),
        FinetuneInit::Checkpoint(c) => (
            Encoder::with_parameters(c.encoder.clone(), c.parameters.clone())?,
            InitProvenance::Checkpoint,
        ),
    };
    check_head(data.space, model.config())?;
    if data.train.is_empty() {
        return Err(PipelineError::EmptyTrainSplit);
    }
    if data.validation.is_empty() {
        return Err(PipelineError::EmptyValidationSplit);
    }
    let train_targets = require_targets(&data.train_targets, 0)?;
    let validation_targets = require_targets(&data.validation_targets, data.train.len())?;

    let initial_validation_mae = evaluate_mae(&model, &data.validation, &validation_targets, train.batch_size)?;
    let mut adam = AdamState::new(model.parameters().tensors());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train.seeds.shuffle);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = LossLog::default();
    let mut step = 0u64;
    let mut best = f64::INFINITY;
    let no_masks = vec![Vec::new(); train.batch_size];

    for epoch in 1..=train.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut abs_error = 0.0;
        for batch in order.chunks(train.batch_size) {
            let graphs: Vec<&PreparedGraph> = batch.iter().map(|&i| &data.train[i]).collect();
            let targets: Vec<f64> = batch.iter().map(|&i| train_targets[i]).collect();
            let mut pass = model.forward(
                &graphs,
                &no_masks[..graphs.len()],
                Mode::Train {
                    dropout_seed: dropout_seed(train, step),
                },
            )?;
            let (loss, value) = pass.mae(&targets).map_err(non_finite(epoch))?;
            abs_error += value.contributions.iter().sum::<f64>();
            let grads = pass.backward(loss)?;
            adam_step(model.parameters_mut().tensors_mut(), &grads, &train.optimizer, &mut adam)?;
            step += 1;
        }
        let train_loss = abs_error / data.train.len() as f64;
        if !train_loss.is_finite() || !model.parameters().is_finite() {
            return Err(PipelineError::NonFiniteLoss { epoch });
        }
        let validation = if epoch % train.validation_interval == 0 || epoch == train.epochs {
            let mae = evaluate_mae(&model, &data.validation, &validation_targets, train.batch_size)?;
            best = best.min(mae);
            Some(mae)
        } else {
            None
        };
        log::debug!("finetune epoch {epoch}: train mae {train_loss:.6} validation {validation:?}");
        log.push(LossEntry {
            epoch,
            train_loss,
            validation,
        });
    }

    Ok(FinetuneRun {
        encoder: model.config().clone(),
        parameters: model.into_parameters(),
        loss_log: log,
        min_validation_mae: best,
        initial_validation_mae,
        init: provenance,
    })
}

#[cfg(test)]
mod tests;
