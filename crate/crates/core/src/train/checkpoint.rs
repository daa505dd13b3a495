//! Binary checkpoint container shared by models and training runs.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (kind, counters, embedded config, rng state, tensor index) and then every
//! tensor as little-endian `f32` in index order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Shape, Tensor3};

pub const MAGIC: &[u8; 8] = b"WUDCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    /// `"train"`, `"waveunet"`, `"generator"` or `"ensemble"`.
    pub kind: String,
    pub counters: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub rng: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor3<f32>>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            header: Header {
                kind: kind.to_string(),
                counters: BTreeMap::new(),
                config,
                rng: None,
                tensors: Vec::new(),
            },
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor3<f32>) {
        self.header.tensors.push(TensorEntry {
            name: name.into(),
            shape: t.shape(),
        });
        self.tensors.push(t);
    }

    /// Appends every parameter under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn counter(&self, key: &str) -> Result<u64> {
        self.header
            .counters
            .get(key)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing counter {key:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor3<f32>> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor3<f32>)> {
        self.header
            .tensors
            .iter()
            .zip(&self.tensors)
            .filter_map(|(e, t)| {
                e.name
                    .strip_prefix(prefix)
                    .map(|n| (n.to_string(), t.clone()))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let data_len: usize = self.tensors.iter().map(|t| t.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + header.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut data = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.shape.len() * 4;
            if data.len() < n {
                return Err(Error::Checkpoint(format!("truncated tensor {:?}", e.name)));
            }
            let vals = data[..n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor3::new(e.shape, vals)?);
            data = &data[n..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
