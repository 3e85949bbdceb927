//! Versioned checkpoint container.
//!
//! ```text
//! bytes 0..8    magic "CARSOCKP"
//! bytes 8..12   format version, u32 little-endian
//! bytes 12..20  header length H, u64 little-endian
//! bytes 20..20+H  UTF-8 JSON header
//! then          tensor payloads, little-endian, in header order
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{OptimizerConfig, OptimizerState};
use crate::nets::{ClassifierSpec, DatasetStats, ParamStore, PurifierSpec};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 8] = b"CARSOCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0} (this build reads {FORMAT_VERSION})")]
    Version(u32),
    #[error("checkpoint truncated at byte {offset}: expected {expected} more bytes, found {actual}")]
    Truncated { offset: usize, expected: usize, actual: usize },
    #[error("checkpoint header: {0}")]
    Header(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Classifier,
    Purifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    classifier: ClassifierSpec,
    purifier: Option<PurifierSpec>,
    stats: Option<DatasetStats>,
    epoch: usize,
    seed: u64,
    optimizer: Option<(OptimizerConfig, u64)>,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume or deploy one network. A purifier checkpoint
/// also carries the spec of the classifier it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub classifier: ClassifierSpec,
    pub purifier: Option<PurifierSpec>,
    pub stats: Option<DatasetStats>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Run seed; every random stream is derived from it and the epoch.
    pub seed: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub metadata: BTreeMap<String, String>,
}

const SLOTS: [&str; 3] = ["m", "v", "slow"];

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, &Tensor<f32>)> =
            self.params.iter().map(|(k, v)| (format!("param/{k}"), v)).collect();
        if let Some(opt) = &self.optimizer {
            for (slot, map) in SLOTS.iter().zip([&opt.m, &opt.v, &opt.slow]) {
                tensors.extend(map.iter().map(|(k, v)| (format!("opt/{slot}/{k}"), v)));
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            classifier: self.classifier.clone(),
            purifier: self.purifier.clone(),
            stats: self.stats.clone(),
            epoch: self.epoch,
            seed: self.seed,
            optimizer: self.optimizer.as_ref().map(|o| (o.config, o.step)),
            metadata: self.metadata.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: DType::F32,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let take = |offset: usize, len: usize| {
            bytes.get(offset..offset + len).ok_or(CheckpointError::Truncated {
                offset,
                expected: len,
                actual: bytes.len().saturating_sub(offset),
            })
        };
        if take(0, 8)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = u64::from_le_bytes(take(12, 8)?.try_into().expect("8 bytes")) as usize;
        let header: Header =
            serde_json::from_slice(take(20, hlen)?).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut offset = 20 + hlen;
        let mut params = ParamStore::new();
        let mut slots: [BTreeMap<String, Tensor<f32>>; 3] = Default::default();
        for entry in &header.tensors {
            if entry.dtype != DType::F32 {
                return Err(CheckpointError::Header(format!("tensor `{}` has unsupported dtype", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            let raw = take(offset, n * 4)?;
            offset += n * 4;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data).expect("extent matches");
            if let Some(name) = entry.name.strip_prefix("param/") {
                params.insert(name, t);
            } else if let Some(rest) = entry.name.strip_prefix("opt/") {
                let (slot, name) = rest
                    .split_once('/')
                    .ok_or_else(|| CheckpointError::Header(format!("bad tensor name `{}`", entry.name)))?;
                let i = SLOTS
                    .iter()
                    .position(|s| *s == slot)
                    .ok_or_else(|| CheckpointError::Header(format!("unknown optimiser slot `{slot}`")))?;
                slots[i].insert(name.to_string(), t);
            } else {
                return Err(CheckpointError::Header(format!("bad tensor name `{}`", entry.name)));
            }
        }
        if offset != bytes.len() {
            return Err(CheckpointError::Header(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - offset
            )));
        }
        let optimizer = header.optimizer.map(|(config, step)| {
            let [m, v, slow] = slots;
            OptimizerState { config, step, m, v, slow }
        });
        Ok(Checkpoint {
            kind: header.kind,
            classifier: header.classifier,
            purifier: header.purifier,
            stats: header.stats,
            epoch: header.epoch,
            seed: header.seed,
            params,
            optimizer,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
