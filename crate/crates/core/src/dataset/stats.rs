use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CategorySpace, Dataset, DatasetError};
use crate::graph::FeaturizedGraph;

/// Per-category node counts over a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub space: CategorySpace,
    /// Dense counts indexed by category.
    counts: Vec<u64>,
    total: u64,
}

impl CategoryStats {
    pub fn from_counts(space: CategorySpace, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), space.num_categories(), "count vector length");
        let total = counts.iter().sum();
        CategoryStats {
            space,
            counts,
            total,
        }
    }

    pub fn from_graphs<'a>(
        space: CategorySpace,
        graphs: impl IntoIterator<Item = &'a FeaturizedGraph>,
    ) -> Self {
        let mut counts = vec![0u64; space.num_categories()];
        for graph in graphs {
            for node in 0..graph.num_nodes() {
                counts[graph.category(node)] += 1;
            }
        }
        Self::from_counts(space, counts)
    }

    pub fn num_categories(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, category: usize) -> u64 {
        self.counts[category]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// `N_all`.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// `r_m = N_m / N_all`; all zeros for an empty corpus.
    pub fn proportion(&self, category: usize) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.counts[category] as f64 / self.total as f64
        }
    }

    pub fn proportions(&self) -> Vec<f64> {
        (0..self.num_categories())
            .map(|m| self.proportion(m))
            .collect()
    }

    /// Categories with a positive count, as `(category, count)`.
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(m, &c)| (m, c))
    }

    /// Non-empty categories sorted by descending count (ties by index).
    pub fn ranked(&self) -> Vec<(usize, u64)> {
        let mut ranked: Vec<_> = self.nonzero().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }

    pub fn merge(&self, other: &CategoryStats) -> CategoryStats {
        assert_eq!(self.space, other.space, "merging stats over different spaces");
        let counts = self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(a, b)| a + b)
            .collect();
        Self::from_counts(self.space, counts)
    }

    pub fn export(&self) -> StatsExport {
        StatsExport {
            counts: self
                .nonzero()
                .map(|(m, c)| (self.space.name(m), c))
                .collect(),
            total: self.total,
            proportions: self
                .nonzero()
                .map(|(m, _)| (self.space.name(m), self.proportion(m)))
                .collect(),
            power_law: fit_power_law(self).ok(),
        }
    }
}

/// JSON shape of an exported distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsExport {
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
    pub proportions: BTreeMap<String, f64>,
    pub power_law: Option<PowerLawFit>,
}

/// `count ≈ scale · rank^exponent` fitted in log-log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub scale: f64,
    /// Sum of squared residuals of the log-log fit.
    pub residual: f64,
}

/// Count every node of every record by category.
pub fn element_distribution(dataset: &Dataset) -> Result<CategoryStats, DatasetError> {
    let graphs = dataset.featurize()?;
    Ok(CategoryStats::from_graphs(dataset.space, &graphs))
}

/// Least-squares line through `(ln rank, ln count)` for the non-empty
/// categories sorted by descending count. The slope is the exponent.
pub fn fit_power_law(stats: &CategoryStats) -> Result<PowerLawFit, DatasetError> {
    let ranked = stats.ranked();
    if ranked.len() < 2 {
        return Err(DatasetError::TooFewCategories(ranked.len()));
    }
    let points: Vec<(f64, f64)> = ranked
        .iter()
        .enumerate()
        .map(|(i, &(_, c))| (((i + 1) as f64).ln(), (c as f64).ln()))
        .collect();
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let residual = points
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum();
    Ok(PowerLawFit {
        exponent: slope,
        scale: intercept.exp(),
        residual,
    })
}
