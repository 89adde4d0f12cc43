//! The featurized graph the encoder consumes.
//!
//! Molecules and synthetic graphs both end up here: a list of nine-field
//! node feature vectors plus symmetric adjacency. The first feature field
//! doubles as the node's category label for the masking task.

use serde::{Deserialize, Serialize};

use crate::chem::{compute_features, MolecularGraph, NodeFeatureVector};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizedGraph {
    features: Vec<NodeFeatureVector>,
    adjacency: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FeaturizedGraphError {
    #[error("feature count {features} does not match node count {nodes}")]
    LengthMismatch { features: usize, nodes: usize },
    #[error("adjacency is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("neighbor {neighbor} of node {node} is out of range")]
    OutOfRange { node: usize, neighbor: usize },
    #[error("node {0} lists itself or a neighbor twice")]
    BadNeighborList(usize),
}

impl FeaturizedGraph {
    pub fn new(
        features: Vec<NodeFeatureVector>,
        adjacency: Vec<Vec<usize>>,
    ) -> Result<Self, FeaturizedGraphError> {
        let n = adjacency.len();
        if features.len() != n {
            return Err(FeaturizedGraphError::LengthMismatch {
                features: features.len(),
                nodes: n,
            });
        }
        for (node, list) in adjacency.iter().enumerate() {
            for (k, &neighbor) in list.iter().enumerate() {
                if neighbor >= n {
                    return Err(FeaturizedGraphError::OutOfRange { node, neighbor });
                }
                if neighbor == node || list[..k].contains(&neighbor) {
                    return Err(FeaturizedGraphError::BadNeighborList(node));
                }
                if !adjacency[neighbor].contains(&node) {
                    return Err(FeaturizedGraphError::Asymmetric(node, neighbor));
                }
            }
        }
        Ok(FeaturizedGraph {
            features,
            adjacency,
        })
    }

    pub fn from_molecule(graph: &MolecularGraph) -> Self {
        FeaturizedGraph {
            features: compute_features(graph),
            adjacency: graph.adjacency().to_vec(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[NodeFeatureVector] {
        &self.features
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// The category label of a node (its atomic-number feature).
    pub fn category(&self, node: usize) -> usize {
        self.features[node].atomic_number_index as usize
    }

    /// Relabel nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.num_nodes();
        assert_eq!(perm.len(), n, "permutation length");
        let mut features = self.features.clone();
        let mut adjacency = vec![Vec::new(); n];
        for old in 0..n {
            features[perm[old]] = self.features[old];
            adjacency[perm[old]] = self.adjacency[old].iter().map(|&j| perm[j]).collect();
        }
        FeaturizedGraph {
            features,
            adjacency,
        }
    }
}
