//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "SSACLCK1"
//! offset 8   u64       length N of the JSON index
//! offset 16  N bytes   UTF-8 JSON index
//! offset 16+N          tensor payload, row-major, concatenated
//! ```
//!
//! The index holds the model configuration and one entry per tensor with its
//! `name`, `dtype` (`"f32"` or `"f64"`), `shape`, and byte `offset`/`nbytes`
//! relative to the start of the payload. Trainable parameters and batch-norm
//! running statistics are both stored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSACLCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Scalar>(model: &Model<T>, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let named: Vec<(String, &Tensor<T>)> = model
        .params()
        .into_iter()
        .map(|(n, _, t)| (n, t))
        .chain(model.buffers())
        .collect();
    let width = std::mem::size_of::<T>() as u64;
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        let bytes = T::to_le_bytes_vec(&t.values);
        tensors.push(TensorEntry {
            name,
            dtype: T::DTYPE.to_string(),
            shape: t.shape.clone(),
            offset: payload.len() as u64,
            nbytes: t.len() as u64 * width,
        });
        payload.extend_from_slice(&bytes);
    }
    let index = CheckpointIndex {
        version: 1,
        model: model.config.clone(),
        metadata,
        tensors,
    };
    let header = serde_json::to_vec(&index)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>, metadata: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_index(bytes: &[u8]) -> Result<(CheckpointIndex, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing checkpoint magic".into()));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = bytes
        .get(16..16 + n)
        .ok_or_else(|| Error::Checkpoint("truncated index".into()))?;
    let index: CheckpointIndex = serde_json::from_slice(header)?;
    Ok((index, &bytes[16 + n..]))
}

fn decode_values<T: Scalar>(entry: &TensorEntry, payload: &[u8]) -> Result<Vec<T>> {
    let start = entry.offset as usize;
    let data = payload
        .get(start..start + entry.nbytes as usize)
        .ok_or_else(|| Error::Checkpoint(format!("{}: payload out of bounds", entry.name)))?;
    let count: usize = entry.shape.iter().product();
    let values: Vec<f64> = match entry.dtype.as_str() {
        "f32" if data.len() == count * 4 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        "f64" if data.len() == count * 8 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        other => {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported dtype {other:?} or size mismatch",
                entry.name
            )))
        }
    };
    Ok(values.into_iter().map(T::of).collect())
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let (index, payload) = read_index(bytes)?;
    if index.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported version {}", index.version)));
    }
    let mut model = Model::<T>::new(index.model.clone(), 0)?;
    let lookup = |name: &str| -> Result<&TensorEntry> {
        index
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let fill = |name: &str, t: &mut Tensor<T>| -> Result<()> {
        let entry = lookup(name)?;
        if entry.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?} but model expects {:?}",
                entry.shape, t.shape
            )));
        }
        t.values = decode_values(entry, payload)?;
        Ok(())
    };
    for (name, _, t) in model.params_mut() {
        fill(&name, t)?;
    }
    for (name, t) in model.buffers_mut() {
        fill(&name, t)?;
    }
    Ok(model)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{ConvStage, EncoderConfig};

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::new(
            EncoderConfig {
                stages: vec![ConvStage { channels: 3, kernel: 3, stride: 2 }],
                representation_dim: 64,
            },
            4,
        );
        c.hidden_dim = 8;
        c
    }

    #[test]
    fn layout_header() {
        let m = Model::<f32>::new(cfg(), 1).unwrap();
        let bytes = to_bytes(&m, serde_json::json!({"epoch": 3})).unwrap();
        assert_eq!(&bytes[..8], b"SSACLCK1");
        let (index, payload) = read_index(&bytes).unwrap();
        assert_eq!(index.metadata["epoch"], 3);
        assert!(index.tensors.iter().all(|t| t.dtype == "f32"));
        let total: u64 = index.tensors.iter().map(|t| t.nbytes).sum();
        assert_eq!(total as usize, payload.len());
    }

    #[test]
    fn round_trip_is_exact() {
        let m = Model::<f32>::new(cfg(), 9).unwrap();
        let back: Model<f32> = from_bytes(&to_bytes(&m, serde_json::Value::Null).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_garbage() {
        assert!(from_bytes::<f32>(b"not a checkpoint at all").is_err());
        let m = Model::<f32>::new(cfg(), 9).unwrap();
        let mut bytes = to_bytes(&m, serde_json::Value::Null).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(from_bytes::<f32>(&bytes).is_err());
    }
}
