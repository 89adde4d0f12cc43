use serde::{Deserialize, Serialize};

use super::elements;
use super::{Atom, BondOrder, MolecularGraph};

pub const NUM_FEATURES: usize = 9;

/// Category cardinality of each node feature, in field order:
/// atomic number index, chirality, degree, formal charge, hydrogens,
/// radical electrons, hybridization, aromatic, in-ring.
pub const FEATURE_VOCAB_SIZES: [usize; NUM_FEATURES] = [119, 4, 11, 12, 9, 5, 3, 2, 2];

/// Formal charges are stored shifted so that -5 maps to index 0.
pub const CHARGE_OFFSET: i32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hybridization {
    Sp = 0,
    Sp2 = 1,
    Sp3 = 2,
}

/// The nine categorical features of one node. Every field is a category
/// index bounded by the matching entry of [`FEATURE_VOCAB_SIZES`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeFeatureVector {
    pub atomic_number_index: u8,
    pub chirality_tag: u8,
    pub degree: u8,
    pub formal_charge: u8,
    pub num_hydrogens: u8,
    pub num_radical_electrons: u8,
    pub hybridization: u8,
    pub is_aromatic: u8,
    pub is_in_ring: u8,
}

impl NodeFeatureVector {
    pub fn as_array(&self) -> [usize; NUM_FEATURES] {
        [
            self.atomic_number_index as usize,
            self.chirality_tag as usize,
            self.degree as usize,
            self.formal_charge as usize,
            self.num_hydrogens as usize,
            self.num_radical_electrons as usize,
            self.hybridization as usize,
            self.is_aromatic as usize,
            self.is_in_ring as usize,
        ]
    }

    /// Returns the index of the first field outside `vocab`, if any.
    pub fn first_out_of_range(&self, vocab: &[usize; NUM_FEATURES]) -> Option<usize> {
        self.as_array()
            .iter()
            .zip(vocab)
            .position(|(value, size)| value >= size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no valence entry for element {element}; only bracket atoms may use it")]
pub struct ValenceError {
    pub element: u8,
}

/// Hydrogens implied by the valence table for an atom written without
/// brackets.
///
/// Aromatic atoms take their first (default) valence and pay one extra unit
/// for the delocalised bond; other atoms use the smallest allowed valence that
/// covers their bond units. The result is reduced by `|formal_charge|` and
/// never negative.
pub fn implicit_hydrogen_count(atom: &Atom, incident: &[BondOrder]) -> Result<u8, ValenceError> {
    let allowed = elements::valences(atom.element).ok_or(ValenceError {
        element: atom.element,
    })?;
    let mut units: i32 = incident.iter().map(|o| o.valence_units() as i32).sum();
    let valence = if atom.aromatic {
        units += 1;
        allowed[0] as i32
    } else {
        allowed
            .iter()
            .map(|&v| v as i32)
            .find(|&v| v >= units)
            .unwrap_or(*allowed.last().unwrap() as i32)
    };
    let h = valence - units - (atom.formal_charge as i32).abs();
    Ok(h.max(0) as u8)
}

/// One feature vector per node. Degree, aromaticity and ring membership are
/// read from topology, hydrogens from `implicit_hydrogens`.
pub fn compute_features(graph: &MolecularGraph) -> Vec<NodeFeatureVector> {
    let mut has_double = vec![false; graph.num_atoms()];
    let mut has_triple = vec![false; graph.num_atoms()];
    for bond in graph.bonds() {
        let (a, b) = bond.endpoints;
        match bond.order {
            BondOrder::Double => {
                has_double[a] = true;
                has_double[b] = true;
            }
            BondOrder::Triple => {
                has_triple[a] = true;
                has_triple[b] = true;
            }
            _ => {}
        }
    }
    let degree_cap = FEATURE_VOCAB_SIZES[2] - 1;
    let charge_cap = FEATURE_VOCAB_SIZES[3] as i32 - 1;
    let h_cap = FEATURE_VOCAB_SIZES[4] - 1;
    graph
        .atoms()
        .iter()
        .enumerate()
        .map(|(i, atom)| {
            let aromatic = atom.aromatic;
            let hybridization = if has_triple[i] {
                Hybridization::Sp
            } else if aromatic || has_double[i] {
                Hybridization::Sp2
            } else {
                Hybridization::Sp3
            };
            NodeFeatureVector {
                atomic_number_index: atom.element - 1,
                chirality_tag: 0,
                degree: graph.neighbors(i).len().min(degree_cap) as u8,
                formal_charge: (atom.formal_charge as i32 + CHARGE_OFFSET).clamp(0, charge_cap) as u8,
                num_hydrogens: (atom.implicit_hydrogens as usize).min(h_cap) as u8,
                num_radical_electrons: 0,
                hybridization: hybridization as u8,
                is_aromatic: aromatic as u8,
                is_in_ring: atom.ring_member as u8,
            }
        })
        .collect()
}
