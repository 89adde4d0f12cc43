//! Synthetic corpora whose node categories follow a power law.
//!
//! Each graph is a random spanning tree plus extra edges. Node categories are
//! drawn with `p(rank) ∝ rank^exponent` (category `m` has rank `m + 1`). Two
//! node features act as noisy signatures of the category so the masking task
//! is learnable but ambiguous: with probability `signature_fidelity` the
//! hydrogen-count feature reports `m`, otherwise a uniformly random category,
//! and the charge feature does the same independently.
//!
//! The regression target is
//! `Σ_m c_m · count_m / num_nodes + noise_std · N(0, 1)` with the published
//! coefficients `c_m = (-1)^m · (m + 1)`, so rarer categories carry larger
//! coefficients.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{CategorySpace, Dataset, DatasetError, LabeledMolecule, MoleculeSource, Provenance};
use crate::chem::{Hybridization, NodeFeatureVector, FEATURE_VOCAB_SIZES};
use crate::graph::FeaturizedGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRule {
    /// One coefficient per category.
    pub coefficients: Vec<f64>,
    pub noise_std: f64,
}

impl TargetRule {
    /// `c_m = (-1)^m (m + 1)` with the given noise level.
    pub fn published(num_categories: usize, noise_std: f64) -> Self {
        TargetRule {
            coefficients: (0..num_categories)
                .map(|m| if m % 2 == 0 { 1.0 } else { -1.0 } * (m + 1) as f64)
                .collect(),
            noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_graphs: usize,
    /// Inclusive node-count range per graph.
    pub nodes_per_graph: (usize, usize),
    pub num_categories: usize,
    /// Rank-frequency exponent, `≤ 0`.
    pub exponent: f64,
    /// Probability of each extra (non-tree) edge.
    pub edge_density: f64,
    #[serde(default = "default_fidelity")]
    pub signature_fidelity: f64,
    /// Defaults to the published rule with noise 0.02.
    #[serde(default)]
    pub target_rule: Option<TargetRule>,
    pub seed: u64,
}

fn default_fidelity() -> f64 {
    0.6
}

impl SynthConfig {
    pub fn new(num_graphs: usize, num_categories: usize, exponent: f64, seed: u64) -> Self {
        SynthConfig {
            num_graphs,
            nodes_per_graph: (4, 10),
            num_categories,
            exponent,
            edge_density: 0.1,
            signature_fidelity: default_fidelity(),
            target_rule: None,
            seed,
        }
    }

    pub fn target_rule(&self) -> TargetRule {
        self.target_rule
            .clone()
            .unwrap_or_else(|| TargetRule::published(self.num_categories, 0.02))
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: &str| Err(DatasetError::BadConfig(msg.to_owned()));
        let (lo, hi) = self.nodes_per_graph;
        if self.num_categories < 2 {
            return bad("num_categories must be at least 2");
        }
        if self.num_categories > FEATURE_VOCAB_SIZES[0] {
            return bad("num_categories exceeds the atomic-number vocabulary");
        }
        if self.exponent > 0.0 || !self.exponent.is_finite() {
            return bad("exponent must be finite and <= 0");
        }
        if lo == 0 || lo > hi {
            return bad("nodes_per_graph must be a non-empty range of positive sizes");
        }
        if !(0.0..=1.0).contains(&self.edge_density) {
            return bad("edge_density must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.signature_fidelity) {
            return bad("signature_fidelity must lie in [0, 1]");
        }
        let rule = self.target_rule();
        if rule.coefficients.len() != self.num_categories {
            return bad("target_rule needs one coefficient per category");
        }
        if rule.noise_std.is_nan() || rule.noise_std < 0.0 || rule.coefficients.iter().any(|c| !c.is_finite()) {
            return bad("target_rule must be finite with non-negative noise");
        }
        Ok(())
    }
}

/// Normalised `p(rank) ∝ rank^exponent` for ranks `1..=num_categories`.
pub fn power_law_pmf(num_categories: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=num_categories)
        .map(|r| (r as f64).powf(exponent))
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / z).collect()
}

pub fn synth_generate(config: &SynthConfig) -> Result<Dataset, DatasetError> {
    config.validate()?;
    let k = config.num_categories;
    let rule = config.target_rule();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let categories = WeightedIndex::new(power_law_pmf(k, config.exponent))
        .map_err(|e| DatasetError::BadConfig(e.to_string()))?;
    let noise = Normal::new(0.0, rule.noise_std).map_err(|e| DatasetError::BadConfig(e.to_string()))?;

    let h_vocab = FEATURE_VOCAB_SIZES[4];
    let charge_vocab = FEATURE_VOCAB_SIZES[3];
    let degree_cap = FEATURE_VOCAB_SIZES[2] - 1;

    let mut records = Vec::with_capacity(config.num_graphs);
    for _ in 0..config.num_graphs {
        let (lo, hi) = config.nodes_per_graph;
        let n = rng.random_range(lo..=hi);
        let labels: Vec<usize> = (0..n).map(|_| categories.sample(&mut rng)).collect();

        let mut adjacency = vec![Vec::new(); n];
        for i in 1..n {
            let j = rng.random_range(0..i);
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        for i in 0..n {
            for j in i + 1..n {
                if !adjacency[i].contains(&j) && rng.random_bool(config.edge_density) {
                    adjacency[i].push(j);
                    adjacency[j].push(i);
                }
            }
        }
        let in_ring = crate::chem::ring_members(&adjacency);

        let signature = |m: usize, vocab: usize, rng: &mut ChaCha8Rng| -> usize {
            let span = k.min(vocab);
            if rng.random_bool(config.signature_fidelity) {
                m % vocab
            } else {
                rng.random_range(0..span)
            }
        };
        let features: Vec<NodeFeatureVector> = (0..n)
            .map(|i| {
                let m = labels[i];
                let degree = adjacency[i].len();
                let hybridization = match degree {
                    0 | 1 => Hybridization::Sp,
                    2 => Hybridization::Sp2,
                    _ => Hybridization::Sp3,
                };
                let h = signature(m, h_vocab, &mut rng);
                let charge = signature(m, charge_vocab, &mut rng);
                NodeFeatureVector {
                    atomic_number_index: m as u8,
                    chirality_tag: 0,
                    degree: degree.min(degree_cap) as u8,
                    formal_charge: charge as u8,
                    num_hydrogens: h as u8,
                    num_radical_electrons: 0,
                    hybridization: hybridization as u8,
                    is_aromatic: 0,
                    is_in_ring: in_ring[i] as u8,
                }
            })
            .collect();

        let mut histogram = vec![0usize; k];
        for &m in &labels {
            histogram[m] += 1;
        }
        let clean: f64 = histogram
            .iter()
            .zip(&rule.coefficients)
            .map(|(&c, coef)| coef * c as f64)
            .sum::<f64>()
            / n as f64;
        let target = clean + noise.sample(&mut rng);

        let graph = FeaturizedGraph::new(features, adjacency).expect("generator builds valid graphs");
        records.push(LabeledMolecule {
            source: MoleculeSource::Graph(graph),
            target: Some(target),
        });
    }
    let mut dataset = Dataset::new(records, CategorySpace::Abstract { num_categories: k });
    dataset.provenance.push(Provenance::Synthetic { seed: config.seed });
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{element_distribution, fit_power_law};

    fn config(num_graphs: usize, k: usize, exponent: f64, seed: u64) -> SynthConfig {
        SynthConfig::new(num_graphs, k, exponent, seed)
    }

    /// `|observed - expected| <= 3 sqrt(n p (1 - p))` per category.
    fn within_three_sigma(counts: &[u64], pmf: &[f64]) {
        let n: u64 = counts.iter().sum();
        for (m, (&c, &p)) in counts.iter().zip(pmf).enumerate() {
            let mean = n as f64 * p;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sd,
                "category {m}: {c} vs {mean:.1} ± {sd:.1}"
            );
        }
    }

    #[test]
    fn pmf_is_normalised_power_law() {
        let p = power_law_pmf(5, -2.0);
        let z: f64 = (1..=5).map(|r| 1.0 / (r * r) as f64).sum();
        for (i, &pi) in p.iter().enumerate() {
            let r = (i + 1) as f64;
            assert!((pi - 1.0 / (r * r) / z).abs() < 1e-15);
        }
        assert_eq!(power_law_pmf(2, 0.0), vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_limit() {
        let d = synth_generate(&config(3000, 2, 0.0, 11)).unwrap();
        let stats = element_distribution(&d).unwrap();
        within_three_sigma(stats.counts(), &[0.5, 0.5]);
    }

    #[test]
    fn matches_analytic_mass_function() {
        // ~10^5 nodes: 14_300 graphs averaging 7 nodes
        let d = synth_generate(&config(14_300, 5, -2.0, 5)).unwrap();
        let stats = element_distribution(&d).unwrap();
        assert!(stats.total() >= 100_000);
        within_three_sigma(stats.counts(), &power_law_pmf(5, -2.0));
    }

    #[test]
    fn fit_recovers_exponent() {
        let d = synth_generate(&config(15_000, 8, -1.5, 21)).unwrap();
        let stats = element_distribution(&d).unwrap();
        assert!(stats.total() >= 100_000);
        let fit = fit_power_law(&stats).unwrap();
        assert!((fit.exponent + 1.5).abs() < 0.1, "{fit:?}");
    }

    #[test]
    fn deterministic_bytes() {
        let a = serde_json::to_vec(&synth_generate(&config(50, 5, -1.5, 9)).unwrap()).unwrap();
        let b = serde_json::to_vec(&synth_generate(&config(50, 5, -1.5, 9)).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_vec(&synth_generate(&config(50, 5, -1.5, 10)).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rare_below_frequent_over_seeds() {
        for seed in 0..20 {
            let d = synth_generate(&config(200, 5, -1.5, seed)).unwrap();
            let r = element_distribution(&d).unwrap().proportions();
            assert!(r[4] < r[0], "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn graphs_are_connected_and_valid() {
        let d = synth_generate(&config(100, 5, -1.5, 2)).unwrap();
        for rec in &d.records {
            let g = rec.featurize().unwrap();
            let n = g.num_nodes();
            assert!((4..=10).contains(&n));
            let mut seen = vec![false; n];
            let mut stack = vec![0];
            seen[0] = true;
            while let Some(u) = stack.pop() {
                for &v in &g.adjacency()[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            assert!(seen.iter().all(|&s| s));
            for f in g.features() {
                assert_eq!(f.first_out_of_range(&FEATURE_VOCAB_SIZES), None);
            }
            assert!(rec.target.unwrap().is_finite());
        }
    }

    #[test]
    fn target_follows_rule_without_noise() {
        let mut cfg = config(20, 3, -1.0, 8);
        cfg.target_rule = Some(TargetRule {
            coefficients: vec![1.0, -2.0, 3.0],
            noise_std: 0.0,
        });
        let d = synth_generate(&cfg).unwrap();
        for rec in &d.records {
            let g = rec.featurize().unwrap();
            let n = g.num_nodes() as f64;
            let expected: f64 = (0..g.num_nodes())
                .map(|i| [1.0, -2.0, 3.0][g.category(i)])
                .sum::<f64>()
                / n;
            assert!((rec.target.unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            config(10, 1, -1.0, 0),
            config(10, 5, 0.5, 0),
            SynthConfig {
                nodes_per_graph: (5, 2),
                ..config(10, 5, -1.0, 0)
            },
            SynthConfig {
                edge_density: 2.0,
                ..config(10, 5, -1.0, 0)
            },
        ] {
            assert!(matches!(synth_generate(&cfg), Err(DatasetError::BadConfig(_))));
        }
    }
}
