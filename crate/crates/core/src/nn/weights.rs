//! Binary weights container.
//!
//! Layout: 8-byte magic `DUVIOWT1`, little-endian `u64` header length, a
//! UTF-8 JSON header, then every tensor as raw little-endian `f64` values in
//! the order listed by the header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DUVIOWT1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WeightsHeader {
    /// Model family, e.g. `dehaze-generator` or `vio-network`.
    pub model: String,
    /// Model configuration needed to rebuild the topology.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(model: &str, config: serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let tensors = store
        .ids()
        .map(|id| TensorEntry {
            name: store.name(id).to_string(),
            shape: store.get(id).shape().to_vec(),
            dtype: "f64le".into(),
            trainable: store.is_trainable(id),
        })
        .collect();
    let header = WeightsHeader {
        model: model.to_string(),
        config,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * store.num_trainable());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        for v in store.get(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(WeightsHeader, Vec<Tensor>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Weights("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Weights("truncated header".into()))?;
    let header: WeightsHeader = serde_json::from_slice(body)?;
    let mut offset = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.dtype != "f64le" {
            return Err(Error::Weights(format!("unsupported dtype {} for {}", entry.dtype, entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| Error::Weights(format!("truncated data for {}", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(entry.shape.clone(), data));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(Error::Weights(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((header, tensors))
}

pub fn save(path: &Path, model: &str, config: serde_json::Value, store: &ParamStore) -> Result<()> {
    let bytes = encode(model, config, store)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(WeightsHeader, Vec<Tensor>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copies decoded tensors into a store built with the same topology.
///
/// Names and shapes must match exactly.
pub fn assign(store: &mut ParamStore, header: &WeightsHeader, tensors: Vec<Tensor>) -> Result<()> {
    if header.tensors.len() != store.len() {
        return Err(Error::Weights(format!(
            "container has {} tensors, model expects {}",
            header.tensors.len(),
            store.len()
        )));
    }
    for (entry, tensor) in header.tensors.iter().zip(tensors) {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| Error::Weights(format!("unexpected tensor {}", entry.name)))?;
        if store.get(id).shape() != tensor.shape() {
            return Err(Error::shape(entry.name.clone(), store.get(id).shape(), tensor.shape()));
        }
        *store.get_mut(id) = tensor;
    }
    Ok(())
}

/// Copies every tensor of `src` whose name (after stripping `prefix`) exists in `dst`.
/// Used to import externally trained encoders; returns the number copied.
pub fn import_matching(dst: &mut ParamStore, header: &WeightsHeader, tensors: &[Tensor], prefix: &str) -> usize {
    let mut copied = 0;
    for (entry, tensor) in header.tensors.iter().zip(tensors) {
        let name = entry.name.strip_prefix(prefix).unwrap_or(&entry.name);
        if let Some(id) = dst.find(name) {
            if dst.get(id).shape() == tensor.shape() {
                *dst.get_mut(id) = tensor.clone();
                copied += 1;
            }
        }
    }
    copied
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]));
        store.add_buffer("a.running_mean", Tensor::new(vec![1], vec![0.5]));
        let bytes = encode("test", serde_json::json!({"k": 1}), &store).unwrap();
        let (header, tensors) = decode(&bytes).unwrap();
        assert_eq!(header.model, "test");
        assert_eq!(header.tensors[1].trainable, false);
        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(&[2, 2]));
        other.add_buffer("a.running_mean", Tensor::zeros(&[1]));
        assign(&mut other, &header, tensors).unwrap();
        for id in store.ids() {
            assert_eq!(store.get(id), other.get(id));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[3]));
        let bytes = encode("m", serde_json::Value::Null, &store).unwrap();
        let (header, tensors) = decode(&bytes).unwrap();
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[4]));
        assert!(assign(&mut other, &header, tensors).is_err());
    }

    #[test]
    fn truncated_container_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[3]));
        let bytes = encode("m", serde_json::Value::Null, &store).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"nonsense").is_err());
    }
}
