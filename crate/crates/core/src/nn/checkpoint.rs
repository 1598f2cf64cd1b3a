//! Parameter checkpoints.
//!
//! Layout of a checkpoint file:
//!
//! ```text
//! 8 bytes   magic "CNPYCKPT"
//! 8 bytes   u64 little-endian length L of the JSON index
//! L bytes   JSON index: {"dtype": "f32"|"f64", "entries": [{name, shape, offset, len, frozen, decay}], "meta": {...}}
//! ...       raw little-endian values of every entry, concatenated in index order
//! ```
//!
//! `offset` and `len` count elements, not bytes. Values round-trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Parameter};
use super::{Float, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CNPYCKPT";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    #[serde(default)]
    pub frozen: bool,
    #[serde(default)]
    pub decay: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    dtype: String,
    entries: Vec<IndexEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub entries: Vec<Parameter<T>>,
    pub meta: serde_json::Value,
}

impl<T: Float> Checkpoint<T> {
    pub fn from_store(store: &ParamStore<T>) -> Self {
        Checkpoint {
            entries: store.iter().map(|(_, p)| p.clone()).collect(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.push(Parameter {
            name: name.into(),
            tensor,
            frozen: false,
            decay: false,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    /// The entries as a parameter store, keeping only names accepted by `keep`.
    pub fn to_store(&self, keep: impl Fn(&str) -> bool) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for e in self.entries.iter().filter(|e| keep(&e.name)) {
            let id = store.add(e.name.clone(), e.tensor.clone(), e.decay);
            store.get_mut(id).frozen = e.frozen;
        }
        store
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let entry = IndexEntry {
                    name: e.name.clone(),
                    shape: e.tensor.shape.clone(),
                    offset,
                    len: e.tensor.len(),
                    frozen: e.frozen,
                    decay: e.decay,
                };
                offset += e.tensor.len();
                entry
            })
            .collect();
        let index = Index {
            dtype: T::DTYPE.to_string(),
            entries,
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&index)?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.entries {
            for v in &e.tensor.data {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Format("truncated checkpoint index".into()))?;
        let index: Index = serde_json::from_slice(header)?;
        if index.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {} values, expected {}",
                index.dtype,
                T::DTYPE
            )));
        }
        let body = &bytes[16 + hlen..];
        let mut entries = Vec::with_capacity(index.entries.len());
        for e in index.entries {
            let n: usize = e.shape.iter().product();
            if n != e.len {
                return Err(Error::Format(format!("entry `{}` shape/len mismatch", e.name)));
            }
            let start = e.offset * T::BYTES;
            let end = start + e.len * T::BYTES;
            let raw = body
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("entry `{}` truncated", e.name)))?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            entries.push(Parameter {
                name: e.name,
                tensor: Tensor {
                    shape: e.shape,
                    data,
                },
                frozen: e.frozen,
                decay: e.decay,
            });
        }
        Ok(Checkpoint {
            entries,
            meta: index.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::<f32>::new();
        store.add(
            "a/weight",
            Tensor::new(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0e-38]).unwrap(),
            true,
        );
        let id = store.add("b", Tensor::new(&[3], vec![f32::MAX, 7.25, -1e-30]).unwrap(), false);
        store.get_mut(id).frozen = true;
        let mut ck = Checkpoint::from_store(&store);
        ck.meta = serde_json::json!({"step": 12});
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.entries.iter().zip(&ck.entries) {
            let bits_a: Vec<u32> = a.tensor.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.tensor.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back.to_store(|_| true), store);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_wrong_dtype_and_garbage() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::new(&[1], vec![1.0]).unwrap(), true);
        let bytes = Checkpoint::from_store(&store).to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
        assert!(Checkpoint::<f64>::from_bytes(b"nonsense-bytes-here").is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
