//! Molecular graphs: SMILES parsing, hydrogen bookkeeping and the nine
//! categorical node features.
//!
//! Graphs are heavy-atom only. Hydrogens, whether written explicitly as
//! bracket atoms or implied by the valence table, are folded into the
//! `implicit_hydrogens` count of the atom they are attached to.

pub mod elements;
mod features;
mod smiles;

use serde::{Deserialize, Serialize};

pub use features::{
    compute_features, implicit_hydrogen_count, Hybridization, NodeFeatureVector, ValenceError,
    FEATURE_VOCAB_SIZES, NUM_FEATURES,
};
pub use smiles::{parse_smiles, ParseError, ParseErrorKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Atom {
    /// Atomic number, `1..=118`.
    pub element: u8,
    pub aromatic: bool,
    pub formal_charge: i8,
    pub implicit_hydrogens: u8,
    /// True iff the atom lies on at least one cycle. Maintained by
    /// [`MolecularGraph::new`].
    pub ring_member: bool,
}

impl Atom {
    pub fn new(element: u8) -> Self {
        Atom {
            element,
            aromatic: false,
            formal_charge: 0,
            implicit_hydrogens: 0,
            ring_member: false,
        }
    }

    pub fn symbol(&self) -> &'static str {
        elements::symbol(self.element).unwrap_or("?")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Valence units consumed by one bond of this order. Aromatic bonds count
    /// as one unit; the extra pi electron is charged to the atom instead.
    pub fn valence_units(self) -> u8 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond {
    pub endpoints: (usize, usize),
    pub order: BondOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("bond {bond} references node {node}, but the graph has {len} nodes")]
    NodeOutOfRange { bond: usize, node: usize, len: usize },
    #[error("bond {0} is a self-loop")]
    SelfLoop(usize),
    #[error("bond {0} duplicates an earlier bond between the same atoms")]
    DuplicateBond(usize),
    #[error("bond {0} is aromatic but joins a non-aromatic atom")]
    AromaticMismatch(usize),
    #[error("atom {0} has unsupported atomic number")]
    BadElement(usize),
}

/// A heavy-atom molecular graph. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MolecularGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    adjacency: Vec<Vec<usize>>,
}

impl MolecularGraph {
    /// Validates the bond list, derives adjacency and recomputes every atom's
    /// `ring_member` flag from topology.
    pub fn new(mut atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self, GraphError> {
        let n = atoms.len();
        for (i, atom) in atoms.iter().enumerate() {
            if !(1..=118).contains(&atom.element) {
                return Err(GraphError::BadElement(i));
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        for (k, bond) in bonds.iter().enumerate() {
            let (a, b) = bond.endpoints;
            for node in [a, b] {
                if node >= n {
                    return Err(GraphError::NodeOutOfRange { bond: k, node, len: n });
                }
            }
            if a == b {
                return Err(GraphError::SelfLoop(k));
            }
            if adjacency[a].contains(&b) {
                return Err(GraphError::DuplicateBond(k));
            }
            if bond.order == BondOrder::Aromatic && !(atoms[a].aromatic && atoms[b].aromatic) {
                return Err(GraphError::AromaticMismatch(k));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        let in_ring = ring_members(&adjacency);
        for (atom, ring) in atoms.iter_mut().zip(in_ring) {
            atom.ring_member = ring;
        }
        Ok(MolecularGraph {
            atoms,
            bonds,
            adjacency,
        })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    /// Orders of all bonds incident to `node`, in bond-list order.
    pub fn incident_orders(&self, node: usize) -> Vec<BondOrder> {
        self.bonds
            .iter()
            .filter(|b| b.endpoints.0 == node || b.endpoints.1 == node)
            .map(|b| b.order)
            .collect()
    }

    /// Heavy-atom count per atomic number.
    pub fn element_counts(&self) -> std::collections::BTreeMap<u8, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for atom in &self.atoms {
            *counts.entry(atom.element).or_insert(0) += 1;
        }
        counts
    }
}

/// An atom is on a cycle iff one of its edges is not a bridge. Edge `(u, v)`
/// is a non-bridge iff `v` stays reachable from `u` once that edge is removed.
pub(crate) fn ring_members(adjacency: &[Vec<usize>]) -> Vec<bool> {
    let n = adjacency.len();
    let mut in_ring = vec![false; n];
    let mut seen = vec![false; n];
    let mut stack = Vec::new();
    for u in 0..n {
        for &v in &adjacency[u] {
            if v < u || (in_ring[u] && in_ring[v]) {
                continue;
            }
            seen.iter_mut().for_each(|s| *s = false);
            seen[u] = true;
            stack.clear();
            for &w in &adjacency[u] {
                if w != v && !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
            while let Some(x) = stack.pop() {
                if x == v {
                    break;
                }
                for &y in &adjacency[x] {
                    if !seen[y] {
                        seen[y] = true;
                        stack.push(y);
                    }
                }
            }
            if seen[v] {
                in_ring[u] = true;
                in_ring[v] = true;
            }
        }
    }
    in_ring
}
