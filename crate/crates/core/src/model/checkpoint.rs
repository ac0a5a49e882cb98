//! Checkpoint layout: one line of JSON header, `\n`, then every tensor as
//! raw little-endian f64 in header order. Offsets count from the first data
//! byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, PaeModel};
use crate::error::{PaeError, Result};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub tensor_name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

impl PaeModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    tensor_name: name.to_string(),
                    shape: t.shape().to_vec(),
                    byte_offset: offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(offset as usize);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| PaeError::format(origin, "missing header terminator"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..split]).map_err(|e| PaeError::format(origin, e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(PaeError::format(
                origin,
                format!("unsupported format_version {}", header.format_version),
            ));
        }
        let data = &bytes[split + 1..];
        let mut expected = 0u64;
        let mut named = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let len: usize = e.shape.iter().product();
            if e.byte_offset != expected {
                return Err(PaeError::format(origin, format!("tensor `{}` has a non-contiguous offset", e.tensor_name)));
            }
            let start = e.byte_offset as usize;
            let end = start + 8 * len;
            let raw = data
                .get(start..end)
                .ok_or_else(|| PaeError::format(origin, format!("tensor `{}` is truncated", e.tensor_name)))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            named.push((e.tensor_name.clone(), Tensor::new(&e.shape, values)?));
            expected = end as u64;
        }
        if expected as usize != data.len() {
            return Err(PaeError::format(origin, "trailing bytes after last tensor"));
        }
        PaeModel::from_params(header.config, named)
    }
}

pub fn save(model: &PaeModel, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| PaeError::io(parent, e))?;
    }
    fs::write(path, model.to_bytes()).map_err(|e| PaeError::io(path, e))
}

pub fn load(path: &Path) -> Result<PaeModel> {
    let bytes = fs::read(path).map_err(|e| PaeError::io(path, e))?;
    PaeModel::from_bytes(&bytes, path)
}
