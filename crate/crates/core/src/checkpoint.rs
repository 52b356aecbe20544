//! Checkpoint files: an 8-byte little-endian header length, a JSON header
//! describing every parameter, then the raw little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::ModelConfig;
use crate::error::{Result, SatError};
use crate::model::Model;
use crate::real::Real;
use crate::tensor::Mat;

pub const FORMAT: &str = "satlab-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub model_config: ModelConfig,
    pub config_hash: String,
    pub params: Vec<ParamEntry>,
}

pub fn to_bytes<T: Real>(model: &Model<T>, config_hash: &str) -> Vec<u8> {
    let mut payload = Vec::with_capacity(model.store.num_scalars() * T::BYTES);
    let mut params = Vec::with_capacity(model.store.len());
    for (name, m) in model.store.iter() {
        params.push(ParamEntry { name: name.to_string(), shape: [m.rows(), m.cols()], dtype: T::DTYPE.into(), offset: payload.len() });
        for &v in m.data() {
            v.write_le(&mut payload);
        }
    }
    let header = CheckpointHeader { format: FORMAT.into(), model_config: model.config.clone(), config_hash: config_hash.into(), params };
    let h = serde_json::to_vec(&header).expect("serializable header");
    let mut out = Vec::with_capacity(8 + h.len() + payload.len());
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&payload);
    out
}

pub fn save<T: Real>(model: &Model<T>, config_hash: &str, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| SatError::io(dir, e))?;
    }
    fs::write(path, to_bytes(model, config_hash)).map_err(|e| SatError::io(path, e))
}

fn read_value<T: Real>(dtype: &str, bytes: &[u8]) -> Option<T> {
    match dtype {
        "f32" => Some(T::c(f64::from(f32::read_le(bytes)))),
        "f64" => Some(T::c(f64::read_le(bytes))),
        _ => None,
    }
}

/// Parses a checkpoint, checking every parameter against the layout its model config implies.
pub fn from_bytes<T: Real>(bytes: &[u8], origin: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    let bad = |m: String| SatError::format(origin, m);
    if bytes.len() < 8 {
        return Err(bad("file too short".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    if header.format != FORMAT {
        return Err(bad(format!("unknown format {:?}", header.format)));
    }
    let payload = &bytes[8 + hlen..];
    let mut model = Model::<T>::new(header.model_config.clone(), 0)?;
    if header.params.len() != model.store.len() {
        return Err(bad(format!("{} parameters, model config implies {}", header.params.len(), model.store.len())));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (entry, id) in header.params.iter().zip(ids) {
        let (rows, cols) = model.store.get(id).shape();
        if model.store.name(id) != entry.name || entry.shape != [rows, cols] {
            return Err(bad(format!(
                "parameter {} {:?} does not match expected {} [{rows}, {cols}]",
                entry.name,
                entry.shape,
                model.store.name(id)
            )));
        }
        let width = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(format!("unknown dtype {other}"))),
        };
        let end = entry.offset + rows * cols * width;
        let raw = payload.get(entry.offset..end).ok_or_else(|| bad(format!("payload too short for {}", entry.name)))?;
        let data: Vec<T> = raw.chunks_exact(width).map(|c| read_value(&entry.dtype, c).expect("dtype checked")).collect();
        *model.store.get_mut(id) = Mat::from_vec(rows, cols, data);
    }
    Ok((model, header))
}

pub fn load<T: Real>(path: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| SatError::io(path, e))?;
    from_bytes(&bytes, path)
}
