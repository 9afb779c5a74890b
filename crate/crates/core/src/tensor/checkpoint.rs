//! Single-file checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header
//! listing tensor names and shapes (plus free-form metadata), then the raw
//! little-endian `f32` payloads concatenated in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{EatError, Result};

const FORMAT: &str = "eat-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory view of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT.to_string(),
            version: VERSION,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, m)| m.data().len() * 4).sum();
        let mut out = Vec::with_capacity(8 + json.len() + payload);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| EatError::Checkpoint("truncated header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(8..8 + header_len)
            .ok_or_else(|| EatError::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(EatError::Checkpoint(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut offset = 8 + header_len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n = entry.rows * entry.cols;
            let raw = bytes
                .get(offset..offset + n * 4)
                .ok_or_else(|| EatError::Checkpoint(format!("truncated payload for {}", entry.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((entry.name, Matrix::from_vec(entry.rows, entry.cols, data)?));
            offset += n * 4;
        }
        if offset != bytes.len() {
            return Err(EatError::Checkpoint(format!(
                "{} trailing bytes after payload",
                bytes.len() - offset
            )));
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    fs::write(path, bytes).map_err(|e| EatError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| EatError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
