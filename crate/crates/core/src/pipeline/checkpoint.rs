//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [8]  magic "MOLMASK\x01"
//! [8]  u64 manifest length in bytes
//! [..] UTF-8 JSON manifest
//! [..] f64 parameter blocks, in manifest order
//! ```
//!
//! The manifest carries the format version, both configs, the loss weights,
//! the loss log, the name and shape of every parameter block, the payload
//! length and a CRC-32 of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LossLog, TrainConfig};
use crate::autodiff::Tensor;
use crate::encoder::{EncoderConfig, ModelParameters};
use crate::imbalance::WeightVector;

pub const MAGIC: [u8; 8] = *b"MOLMASK\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub parameters: ModelParameters,
    pub weights: WeightVector,
    pub train: TrainConfig,
    pub loss_log: LossLog,
}

impl Checkpoint {
    pub fn new(
        encoder: EncoderConfig,
        parameters: ModelParameters,
        weights: WeightVector,
        train: TrainConfig,
        loss_log: LossLog,
    ) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            encoder,
            parameters,
            weights,
            train,
            loss_log,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.parameters.count() * 8);
        for t in self.parameters.tensors() {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: self.format_version,
            encoder: self.encoder.clone(),
            train: self.train.clone(),
            weights: self.weights.clone(),
            loss_log: self.loss_log.clone(),
            parameters: self
                .parameters
                .names()
                .iter()
                .zip(self.parameters.tensors())
                .map(|(name, t)| BlockEntry {
                    name: name.clone(),
                    shape: t.shape(),
                })
                .collect(),
            payload_bytes: payload.len() as u64,
            checksum: crc32fast::hash(&payload),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |msg: &str| CheckpointError::CorruptPayload(msg.to_owned());
        if bytes.len() < 16 || bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint header"));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest_end = 16usize
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("manifest runs past end of file"))?;
        let raw: serde_json::Value =
            serde_json::from_slice(&bytes[16..manifest_end]).map_err(|e| corrupt(&format!("manifest: {e}")))?;
        let found = raw.get("format_version").and_then(serde_json::Value::as_u64);
        if found != Some(FORMAT_VERSION as u64) {
            return Err(CheckpointError::VersionMismatch {
                expected: FORMAT_VERSION,
                found,
            });
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| corrupt(&format!("manifest: {e}")))?;

        let payload = &bytes[manifest_end..];
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(corrupt(&format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        if crc32fast::hash(payload) != manifest.checksum {
            return Err(corrupt("payload checksum mismatch"));
        }
        let expected: usize = manifest.parameters.iter().map(|b| b.shape[0] * b.shape[1]).sum();
        if expected * 8 != payload.len() {
            return Err(corrupt("parameter shapes do not cover the payload"));
        }

        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut names = Vec::with_capacity(manifest.parameters.len());
        let mut tensors = Vec::with_capacity(manifest.parameters.len());
        for block in manifest.parameters {
            let [rows, cols] = block.shape;
            tensors.push(Tensor::new(rows, cols, values.by_ref().take(rows * cols).collect()));
            names.push(block.name);
        }
        let parameters = ModelParameters::from_parts(&manifest.encoder, names, tensors)
            .map_err(|e| CheckpointError::CorruptPayload(e.to_string()))?;
        Ok(Checkpoint {
            format_version: manifest.format_version,
            encoder: manifest.encoder,
            parameters,
            weights: manifest.weights,
            train: manifest.train,
            loss_log: manifest.loss_log,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format version {found:?} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: Option<u64> },
    #[error("corrupt checkpoint: {0}")]
    CorruptPayload(String),
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    encoder: EncoderConfig,
    train: TrainConfig,
    weights: WeightVector,
    loss_log: LossLog,
    parameters: Vec<BlockEntry>,
    payload_bytes: u64,
    checksum: u32,
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let tmp = path.with_extension("partial");
    let mut file = fs::File::create(&tmp)?;
    file.write_all(&checkpoint.to_bytes())?;
    file.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
