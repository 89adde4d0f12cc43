use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    finetune_prepared, pretrain_prepared, save_checkpoint, FinetuneInit, LossLog, MaskMode, PipelineError, Seeds,
    TrainConfig, TrainingData,
};
use crate::dataset::Dataset;
use crate::encoder::EncoderConfig;
use crate::imbalance::WeightScheme;
use crate::metrics::{evaluate_recall, GroupSpec, RecallReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    /// Template for pre-training; scheme, mask mode and seeds are set per cell.
    #[serde(default)]
    pub pretrain: TrainConfig,
    /// Template for fine-tuning; seeds are set per cell.
    #[serde(default)]
    pub finetune: TrainConfig,
    #[serde(default = "all_schemes")]
    pub schemes: Vec<WeightScheme>,
    #[serde(default = "MaskMode::standard_grid")]
    pub mask_modes: Vec<MaskMode>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Recall groups; the space's default groups when absent.
    #[serde(default)]
    pub groups: Option<GroupSpec>,
}

fn all_schemes() -> Vec<WeightScheme> {
    WeightScheme::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.schemes.is_empty() || self.mask_modes.is_empty() || self.seeds.is_empty() {
            return Err(PipelineError::InvalidConfig("grid axes must be non-empty".into()));
        }
        for mode in &self.mask_modes {
            mode.validate()?;
        }
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    /// Cells in report order: scheme, then mask mode, then seed.
    pub fn cells(&self) -> Vec<(WeightScheme, MaskMode, u64)> {
        let mut out = Vec::new();
        for &scheme in &self.schemes {
            for &mode in &self.mask_modes {
                for &seed in &self.seeds {
                    out.push((scheme, mode, seed));
                }
            }
        }
        out
    }
}

/// Seed streams of one cell: pre-training, fine-tuning, recall masks.
pub fn cell_seeds(seed: u64) -> (Seeds, Seeds, u64) {
    let pretrain = Seeds::from_base(seed.wrapping_mul(2));
    let finetune = Seeds::from_base(seed.wrapping_mul(2).wrapping_add(1));
    (pretrain, finetune, pretrain.mask ^ finetune.mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub scheme: WeightScheme,
    pub mask_mode: MaskMode,
    pub seed: u64,
    /// Pre-training loss per epoch.
    pub loss_log: LossLog,
    pub finetune_log: LossLog,
    /// Recall on the validation split, masked like pre-training.
    pub recall_report: Option<RecallReport>,
    pub min_validation_mae: Option<f64>,
    pub runtime_seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    pub fn cell(&self, scheme: WeightScheme, mask_mode: MaskMode, seed: u64) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.scheme == scheme && c.mask_mode == mask_mode && c.seed == seed)
    }

    /// Copy with runtimes zeroed, for comparing runs.
    pub fn without_timings(&self) -> GridReport {
        let mut out = self.clone();
        for cell in &mut out.cells {
            cell.runtime_seconds = 0.0;
        }
        out
    }
}

pub fn cell_file_name(scheme: WeightScheme, mask_mode: MaskMode, seed: u64) -> String {
    format!("{scheme}__{mask_mode}__seed{seed}")
}

fn run_cell(
    data: &TrainingData,
    config: &GridConfig,
    groups: &GroupSpec,
    (scheme, mask_mode, seed): (WeightScheme, MaskMode, u64),
    checkpoint_path: Option<&Path>,
) -> Result<GridCell, PipelineError> {
    let start = Instant::now();
    let (pretrain_seeds, finetune_seeds, recall_seed) = cell_seeds(seed);
    let pretrain_config = TrainConfig {
        scheme,
        mask_mode,
        seeds: pretrain_seeds,
        ..config.pretrain.clone()
    };
    let pretrained = pretrain_prepared(data, &config.encoder, &pretrain_config)?;
    if let Some(path) = checkpoint_path {
        save_checkpoint(&pretrained.checkpoint, path)?;
    }
    let model = crate::encoder::Encoder::with_parameters(
        pretrained.checkpoint.encoder.clone(),
        pretrained.checkpoint.parameters.clone(),
    )?;
    let recall = evaluate_recall(&model, &data.validation, data.space, mask_mode, groups, recall_seed)
        .map_err(|e| PipelineError::Recall(e.to_string()))?;

    let finetune_config = TrainConfig {
        seeds: finetune_seeds,
        ..config.finetune.clone()
    };
    let tuned = finetune_prepared(
        FinetuneInit::Checkpoint(&pretrained.checkpoint),
        data,
        &config.encoder,
        &finetune_config,
    )?;
    Ok(GridCell {
        scheme,
        mask_mode,
        seed,
        loss_log: pretrained.loss_log,
        finetune_log: tuned.loss_log,
        recall_report: Some(recall),
        min_validation_mae: Some(tuned.min_validation_mae),
        runtime_seconds: start.elapsed().as_secs_f64(),
        error: None,
    })
}

/// Pre-trains, evaluates recall and fine-tunes every cell of the grid.
///
/// With `out_dir`, each finished cell is stored as
/// `cells/<cell_file_name>.json` next to its pre-training checkpoint
/// (`.bin`), and cells whose file already exists are read back instead of
/// recomputed. Failed cells carry their error and are retried on the next
/// run.
pub fn run_experiment_grid(
    dataset: &Dataset,
    config: &GridConfig,
    out_dir: Option<&Path>,
) -> Result<GridReport, PipelineError> {
    config.validate()?;
    let data = TrainingData::new(dataset, &config.encoder)?;
    run_grid_prepared(&data, config, out_dir)
}

pub fn run_grid_prepared(
    data: &TrainingData,
    config: &GridConfig,
    out_dir: Option<&Path>,
) -> Result<GridReport, PipelineError> {
    config.validate()?;
    let groups = config.groups.clone().unwrap_or_else(|| GroupSpec::default_for(data.space));
    let cell_dir: Option<PathBuf> = out_dir.map(|d| d.join("cells"));
    if let Some(dir) = &cell_dir {
        fs::create_dir_all(dir)?;
    }
    let mut report = GridReport::default();
    for key in config.cells() {
        let (scheme, mode, seed) = key;
        let name = cell_file_name(scheme, mode, seed);
        let json_path = cell_dir.as_ref().map(|d| d.join(format!("{name}.json")));
        if let Some(cached) = json_path.as_deref().and_then(read_cell) {
            log::info!("grid cell {name}: reusing stored result");
            report.cells.push(cached);
            continue;
        }
        let checkpoint_path = cell_dir.as_ref().map(|d| d.join(format!("{name}.bin")));
        let start = Instant::now();
        let cell = match run_cell(data, config, &groups, key, checkpoint_path.as_deref()) {
            Ok(cell) => {
                if let Some(path) = &json_path {
                    let json = serde_json::to_vec_pretty(&cell).expect("grid cell serializes");
                    fs::write(path, json)?;
                }
                cell
            }
            Err(e) => {
                log::warn!("grid cell {name} failed: {e}");
                GridCell {
                    scheme,
                    mask_mode: mode,
                    seed,
                    loss_log: LossLog::default(),
                    finetune_log: LossLog::default(),
                    recall_report: None,
                    min_validation_mae: None,
                    runtime_seconds: start.elapsed().as_secs_f64(),
                    error: Some(e.to_string()),
                }
            }
        };
        log::info!("grid cell {name}: {:.1}s", cell.runtime_seconds);
        report.cells.push(cell);
    }
    Ok(report)
}

fn read_cell(path: &Path) -> Option<GridCell> {
    let cell: GridCell = serde_json::from_slice(&fs::read(path).ok()?).ok()?;
    cell.error.is_none().then_some(cell)
}
