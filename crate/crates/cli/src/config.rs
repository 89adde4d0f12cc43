//! The experiment config file.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "data": { "synth": { "num_graphs": 2000, "nodes_per_graph": [4, 10],
//!                        "num_categories": 5, "exponent": -1.5,
//!                        "edge_density": 0.1, "seed": 0 } },
//!   "split": { "train_fraction": 0.8, "seed": 0 },
//!   "encoder": { "num_layers": 4, "hidden_dim": 64 },
//!   "pretrain": { "scheme": "log", "mask_mode": { "fixed_count": 1 }, "epochs": 60 },
//!   "finetune": { "epochs": 30, "validation_interval": 5 },
//!   "grid": { "schemes": ["no_weight", "reciprocal"], "seeds": [0, 1] },
//!   "groups": [ { "name": "c0", "members": ["c0"] }, { "name": "rare", "members": ["c3", "c4"] } ]
//! }
//! ```
//!
//! `data` is either `{"csv": "path"}` (relative to the config file) or
//! `{"synth": {...}}`. When `encoder.num_element_categories` is omitted it is
//! taken from the data: 119 for element data, `num_categories` for
//! synthetic data.

use std::fs;
use std::path::{Path, PathBuf};

use molmask::dataset::{load_csv, split, synth_generate, CategorySpace, Dataset, SynthConfig};
use molmask::encoder::EncoderConfig;
use molmask::imbalance::WeightScheme;
use molmask::metrics::GroupSpec;
use molmask::pipeline::{GridConfig, MaskMode, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv(PathBuf),
    Synth(SynthConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    pub schemes: Vec<WeightScheme>,
    pub mask_modes: Vec<MaskMode>,
    pub seeds: Vec<u64>,
}

impl Default for GridAxes {
    fn default() -> Self {
        GridAxes {
            schemes: WeightScheme::ALL.to_vec(),
            mask_modes: MaskMode::standard_grid(),
            seeds: vec![0],
        }
    }
}

/// A recall group by category names, e.g. `{"name": "O,N", "members": ["O", "N"]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupDef {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u64,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub finetune: TrainConfig,
    #[serde(default)]
    pub grid: GridAxes,
    #[serde(default)]
    pub groups: Option<Vec<GroupDef>>,
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Deserializes with the failing field path in the message.
pub fn from_value<T: serde::de::DeserializeOwned>(value: Value, origin: &Path) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." { String::new() } else { format!(" at {path}") };
        CliError::Input(format!("{}{at}: {}", origin.display(), e.into_inner()))
    })
}

pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let mut raw = read_json(path)?;
    match raw.get("schema_version").and_then(Value::as_u64) {
        Some(SCHEMA_VERSION) => {}
        other => {
            return Err(CliError::Input(format!(
                "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                path.display(),
                other.map_or("missing".to_owned(), |v| v.to_string())
            )))
        }
    }
    let categories = match raw.pointer("/data/synth/num_categories") {
        Some(k) => k.clone(),
        None => Value::from(CategorySpace::Elements.num_categories()),
    };
    if let Some(obj) = raw.as_object_mut() {
        let encoder = obj.entry("encoder").or_insert_with(|| Value::Object(Default::default()));
        if let Some(enc) = encoder.as_object_mut() {
            enc.entry("num_element_categories").or_insert(categories);
        }
    }
    let mut config: ExperimentConfig = from_value(raw, path)?;
    if let DataSource::Csv(csv) = &mut config.data {
        if csv.is_relative() {
            *csv = path.parent().unwrap_or(Path::new(".")).join(&*csv);
        }
    }
    Ok(config)
}

pub fn load_synth(path: &Path) -> Result<SynthConfig, CliError> {
    from_value(read_json(path)?, path)
}

impl ExperimentConfig {
    /// The configured data, split for training and validation.
    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let data = match &self.data {
            DataSource::Csv(path) => load_csv(path),
            DataSource::Synth(synth) => synth_generate(synth),
        }
        .map_err(|e| CliError::Input(e.to_string()))?;
        split(&data, self.split.train_fraction, self.split.seed).map_err(|e| CliError::Input(e.to_string()))
    }

    pub fn group_spec(&self, space: CategorySpace) -> Result<Option<GroupSpec>, CliError> {
        self.groups.as_deref().map(|defs| resolve_groups(defs, space)).transpose()
    }

    pub fn grid_config(&self, space: CategorySpace) -> Result<GridConfig, CliError> {
        Ok(GridConfig {
            encoder: self.encoder.clone(),
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            schemes: self.grid.schemes.clone(),
            mask_modes: self.grid.mask_modes.clone(),
            seeds: self.grid.seeds.clone(),
            groups: self.group_spec(space)?,
        })
    }
}

pub fn resolve_groups(defs: &[GroupDef], space: CategorySpace) -> Result<GroupSpec, CliError> {
    let groups = defs
        .iter()
        .map(|g| {
            let members = g
                .members
                .iter()
                .map(|m| {
                    space
                        .parse_name(m)
                        .ok_or_else(|| CliError::Input(format!("group {:?}: unknown category {m:?}", g.name)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((g.name.clone(), members))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    GroupSpec::new(groups).map_err(|e| CliError::Input(e.to_string()))
}

pub fn load_groups(path: &Path, space: CategorySpace) -> Result<GroupSpec, CliError> {
    let defs: Vec<GroupDef> = from_value(read_json(path)?, path)?;
    resolve_groups(&defs, space)
}

/// `1`, `3` (node counts), `15%` or `0.15` (proportions).
pub fn parse_mask_mode(text: &str) -> Result<MaskMode, String> {
    let mode = if let Some(pct) = text.strip_suffix('%') {
        let p: f64 = pct.parse().map_err(|_| format!("bad percentage {text:?}"))?;
        MaskMode::Proportion(p / 100.0)
    } else if text.contains('.') {
        MaskMode::Proportion(text.parse().map_err(|_| format!("bad proportion {text:?}"))?)
    } else {
        MaskMode::FixedCount(text.parse().map_err(|_| format!("bad node count {text:?}"))?)
    };
    match mode {
        MaskMode::FixedCount(0) => Err("mask node count must be at least 1".into()),
        MaskMode::Proportion(p) if !(p > 0.0 && p <= 1.0) => Err(format!("mask proportion {p} outside (0, 1]")),
        _ => Ok(mode),
    }
}
