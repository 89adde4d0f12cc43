//! Labeled molecule corpora: CSV ingestion, subsampling, train/validation
//! splits, synthetic power-law corpora and category statistics.

mod stats;
mod synth;

use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chem::{elements, parse_smiles, ParseError, FEATURE_VOCAB_SIZES};
use crate::graph::FeaturizedGraph;

pub use stats::{element_distribution, fit_power_law, CategoryStats, PowerLawFit, StatsExport};
pub use synth::{power_law_pmf, synth_generate, SynthConfig, TargetRule};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("input file {0} does not exist")]
    MissingFile(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad header {found:?}; expected exactly `smiles,target`")]
    BadHeader { found: String },
    #[error("unreadable row at line {line}: {reason}")]
    UnreadableRow { line: u64, reason: String },
    #[error("fraction {0} is outside the allowed range")]
    BadFraction(f64),
    #[error("record {record}: {source}")]
    Parse {
        record: usize,
        #[source]
        source: ParseError,
    },
    #[error("record {record} has category {category}, but the space holds {num_categories}")]
    CategoryOutOfRange {
        record: usize,
        category: usize,
        num_categories: usize,
    },
    #[error("power-law fit needs at least 2 non-empty categories, found {0}")]
    TooFewCategories(usize),
    #[error("bad synthetic config: {0}")]
    BadConfig(String),
}

/// How node category indices are named and how many there are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategorySpace {
    /// Chemical elements; category `m` is atomic number `m + 1`.
    Elements,
    /// Abstract categories `0..num_categories`, ranked by construction.
    Abstract { num_categories: usize },
}

impl CategorySpace {
    pub fn num_categories(&self) -> usize {
        match self {
            CategorySpace::Elements => FEATURE_VOCAB_SIZES[0],
            CategorySpace::Abstract { num_categories } => *num_categories,
        }
    }

    pub fn name(&self, category: usize) -> String {
        match self {
            CategorySpace::Elements => elements::symbol(category as u8 + 1)
                .map(str::to_owned)
                .unwrap_or_else(|| format!("Z{}", category + 1)),
            CategorySpace::Abstract { .. } => format!("c{category}"),
        }
    }

    /// Inverse of [`CategorySpace::name`].
    pub fn parse_name(&self, name: &str) -> Option<usize> {
        match self {
            CategorySpace::Elements => elements::atomic_number(name).map(|z| z as usize - 1),
            CategorySpace::Abstract { num_categories } => name
                .strip_prefix('c')
                .and_then(|s| s.parse().ok())
                .filter(|m| m < num_categories),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoleculeSource {
    Smiles(String),
    /// Synthetic records skip SMILES and carry their graph directly.
    Graph(FeaturizedGraph),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledMolecule {
    pub source: MoleculeSource,
    /// Regression label (eV for real corpora). Always finite when present.
    pub target: Option<f64>,
}

impl LabeledMolecule {
    pub fn smiles(smiles: impl Into<String>, target: Option<f64>) -> Self {
        LabeledMolecule {
            source: MoleculeSource::Smiles(smiles.into()),
            target,
        }
    }

    pub fn featurize(&self) -> Result<FeaturizedGraph, ParseError> {
        match &self.source {
            MoleculeSource::Smiles(s) => Ok(FeaturizedGraph::from_molecule(&parse_smiles(s)?)),
            MoleculeSource::Graph(g) => Ok(g.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Provenance {
    Csv { path: String },
    Synthetic { seed: u64 },
    Subsample { fraction: f64, seed: u64 },
    Split { train_fraction: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<LabeledMolecule>,
    pub space: CategorySpace,
    /// Per-record split tag; `None` until [`split`] runs.
    pub split_assignment: Option<Vec<Split>>,
    pub provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn new(records: Vec<LabeledMolecule>, space: CategorySpace) -> Self {
        Dataset {
            records,
            space,
            split_assignment: None,
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn indices_of(&self, wanted: Split) -> Vec<usize> {
        match &self.split_assignment {
            None if wanted == Split::Train => (0..self.len()).collect(),
            None => Vec::new(),
            Some(tags) => (0..self.len()).filter(|&i| tags[i] == wanted).collect(),
        }
    }

    /// Training records, or every record when no split was made.
    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Train)
    }

    pub fn validation_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Validation)
    }

    /// Parse every record. Runs in parallel; the first failing record (by
    /// index) is reported.
    pub fn featurize(&self) -> Result<Vec<FeaturizedGraph>, DatasetError> {
        let num_categories = self.space.num_categories();
        let results: Vec<Result<FeaturizedGraph, DatasetError>> = self
            .records
            .par_iter()
            .enumerate()
            .map(|(record, rec)| {
                let graph = rec
                    .featurize()
                    .map_err(|source| DatasetError::Parse { record, source })?;
                for node in 0..graph.num_nodes() {
                    let category = graph.category(node);
                    if category >= num_categories {
                        return Err(DatasetError::CategoryOutOfRange {
                            record,
                            category,
                            num_categories,
                        });
                    }
                }
                Ok(graph)
            })
            .collect();
        results.into_iter().collect()
    }
}

/// Read a `smiles,target` CSV. The target column may be empty per row.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => DatasetError::MissingFile(path.to_owned()),
        _ => DatasetError::Io(e),
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::None)
        .from_reader(file);
    let mut rows = reader.records();

    let header = match rows.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => {
            return Err(DatasetError::BadHeader {
                found: e.to_string(),
            })
        }
        None => {
            return Err(DatasetError::BadHeader {
                found: String::new(),
            })
        }
    };
    let header_fields: Vec<&str> = header.iter().collect();
    let first = header_fields
        .first()
        .map(|s| s.trim_start_matches('\u{feff}'));
    if header_fields.len() != 2 || first != Some("smiles") || header_fields[1] != "target" {
        return Err(DatasetError::BadHeader {
            found: header_fields.join(","),
        });
    }

    let mut records = Vec::new();
    for row in rows {
        let row = row.map_err(|e| DatasetError::UnreadableRow {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let unreadable = |reason: String| DatasetError::UnreadableRow { line, reason };
        if row.len() != 2 {
            return Err(unreadable(format!("expected 2 fields, found {}", row.len())));
        }
        let smiles = &row[0];
        if smiles.is_empty() {
            return Err(unreadable("empty smiles".into()));
        }
        let target = match &row[1] {
            "" => None,
            raw => {
                let value: f64 = raw
                    .trim()
                    .parse()
                    .map_err(|_| unreadable(format!("target {raw:?} is not a number")))?;
                if !value.is_finite() {
                    return Err(unreadable(format!("target {raw:?} is not finite")));
                }
                Some(value)
            }
        };
        records.push(LabeledMolecule::smiles(smiles, target));
    }
    let mut dataset = Dataset::new(records, CategorySpace::Elements);
    dataset.provenance.push(Provenance::Csv {
        path: path.display().to_string(),
    });
    Ok(dataset)
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Uniform sample without replacement of `round(fraction * len)` records,
/// kept in their original order.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::BadFraction(fraction));
    }
    let n = dataset.len();
    let k = round_half_up(fraction * n as f64).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let mut out = Dataset {
        records: picked.iter().map(|&i| dataset.records[i].clone()).collect(),
        space: dataset.space,
        split_assignment: dataset
            .split_assignment
            .as_ref()
            .map(|tags| picked.iter().map(|&i| tags[i]).collect()),
        provenance: dataset.provenance.clone(),
    };
    out.provenance.push(Provenance::Subsample { fraction, seed });
    Ok(out)
}

/// Assign `round(train_fraction * len)` random records to training and the
/// rest to validation.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<Dataset, DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::BadFraction(train_fraction));
    }
    let n = dataset.len();
    let n_train = round_half_up(train_fraction * n as f64).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tags = vec![Split::Validation; n];
    for &i in &order[..n_train] {
        tags[i] = Split::Train;
    }
    let mut out = dataset.clone();
    out.split_assignment = Some(tags);
    out.provenance.push(Provenance::Split {
        train_fraction,
        seed,
    });
    Ok(out)
}
