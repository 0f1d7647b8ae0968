//! The `.rtc` tensor container.
//!
//! Layout: 8-byte magic `RTCV0001`, little-endian `u64` manifest length, the
//! manifest as compact JSON, then the blob of little-endian binary32 values.
//! Records are sorted by name and packed back to back from offset 0, so every
//! container has exactly one byte representation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RTCV0001";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
    tensors: Vec<ManifestRecord>,
}

/// Named f32 tensors plus free-form string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorContainer {
    pub metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Option<Tensor<f32>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Manifest records in canonical order.
    pub fn manifest(&self) -> Vec<ManifestRecord> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let rec = ManifestRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    byte_offset: offset,
                };
                offset += 4 * t.len() as u64;
                rec
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            metadata: self.metadata.clone(),
            tensors: self.manifest(),
        };
        let text = serde_json::to_vec(&manifest).expect("manifest serializes");
        let blob_len: usize = self.tensors.values().map(|t| 4 * t.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + text.len() + blob_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Format(m);
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(fmt("missing RTCV0001 magic".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let mlen = usize::try_from(mlen).map_err(|_| fmt("manifest length overflow".into()))?;
        let mend = HEADER_LEN
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt(format!("manifest length {mlen} exceeds file")))?;
        let text = &bytes[HEADER_LEN..mend];
        let manifest: Manifest = serde_json::from_slice(text).map_err(|e| fmt(format!("malformed manifest: {e}")))?;
        let blob = &bytes[mend..];

        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        let mut prev: Option<&str> = None;
        for rec in &manifest.tensors {
            let bad = |why: &str| fmt(format!("record {:?}: {why}", rec.name));
            if rec.dtype != "f32" {
                return Err(bad(&format!("dtype {:?} is not f32", rec.dtype)));
            }
            if let Some(p) = prev {
                if p == rec.name {
                    return Err(bad("duplicate name"));
                }
                if p > rec.name.as_str() {
                    return Err(bad("records not sorted by name"));
                }
            }
            if rec.byte_offset % 4 != 0 {
                return Err(bad("offset not 4-byte aligned"));
            }
            if rec.byte_offset < expected_offset {
                return Err(bad("offset overlaps the previous record"));
            }
            if rec.byte_offset != expected_offset {
                return Err(bad("gap before offset"));
            }
            let n: usize = rec.shape.iter().product();
            if rec.shape.is_empty() || n == 0 {
                return Err(bad("empty shape"));
            }
            let start = rec.byte_offset as usize;
            let end = start + 4 * n;
            if end > blob.len() {
                return Err(bad("blob truncated"));
            }
            let data: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(rec.shape.clone(), data).map_err(|e| bad(&e.to_string()))?;
            tensors.insert(rec.name.clone(), t);
            expected_offset = end as u64;
            prev = Some(&rec.name);
        }
        if expected_offset as usize != blob.len() {
            return Err(fmt(format!(
                "blob has {} bytes, records cover {expected_offset}",
                blob.len()
            )));
        }
        let out = Self {
            metadata: manifest.metadata,
            tensors,
        };
        let canonical = serde_json::to_vec(&Manifest {
            metadata: out.metadata.clone(),
            tensors: out.manifest(),
        })
        .expect("manifest serializes");
        if canonical != text {
            return Err(fmt("manifest text is not in canonical form".into()));
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Fetches a tensor or fails naming it.
    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Load(format!("missing tensor {name}")))
    }
}
