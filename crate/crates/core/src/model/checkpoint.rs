//! Checkpoint layout: `u64` little-endian header length, JSON header, then
//! every parameter as little-endian `f32` in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Model, ModelConfig, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(path: &Path, model: &Model, seed: u64, step: u64) -> Result<()> {
    let mut params = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (i, t) in model.params.iter().enumerate() {
        params.push(ParamEntry {
            name: model.params.name(i).to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = CheckpointHeader {
        config: model.config.clone(),
        seed,
        step,
        params,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(8 + json.len() + 4 * offset);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in model.params.iter() {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&buf).map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let bad = |msg: &str| Error::file(path, msg);
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("truncated header length"))?;
    let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header too large"))?;
    let json = bytes
        .get(8..8usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    let payload = &bytes[8 + hlen..];
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut names = Vec::with_capacity(header.params.len());
    let mut tensors = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| bad(&format!("parameter {} runs past the payload", e.name)))?;
        names.push(e.name.clone());
        tensors.push(Tensor::new(e.shape.clone(), data.to_vec())?);
    }
    let expected: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if expected != values.len() {
        return Err(bad("payload size does not match the manifest"));
    }
    let model = Model::from_params(header.config.clone(), ParamStore::from_parts(names, tensors))?;
    Ok((model, header))
}
