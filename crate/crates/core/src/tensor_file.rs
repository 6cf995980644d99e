// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor container: a JSON manifest plus a flat binary of little-endian
//! `f64` values.
//!
//! ```json
//! {
//!   "format": "f64le",
//!   "data": "weights.bin",
//!   "tensors": [ { "name": "embed.W_E", "offset": 0, "shape": [96, 64] } ]
//! }
//! ```
//!
//! `offset` is in bytes from the start of the data file; `data` is resolved
//! relative to the manifest's directory.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "f64le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub data: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    order: Vec<String>,
    tensors: HashMap<String, (Vec<usize>, Vec<f64>)>,
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        if !self.tensors.contains_key(&name) {
            self.order.push(name.clone());
        }
        self.tensors.insert(name, (shape, data));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors.get(name).map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Writes `manifest_path` and a sibling data file named `data_name`.
    pub fn write(&self, manifest_path: &Path, data_name: &str) -> Result<()> {
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut bytes = Vec::new();
        let mut entries = Vec::with_capacity(self.order.len());
        for name in &self.order {
            let (shape, data) = &self.tensors[name];
            entries.push(TensorEntry {
                name: name.clone(),
                offset: bytes.len() as u64,
                shape: shape.clone(),
            });
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            data: data_name.to_string(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let data_path = dir.join(data_name);
        fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(manifest_path, json + "\n").map_err(|e| Error::io(manifest_path, e))?;
        Ok(())
    }

    /// Reads a manifest and its data file. A tensor whose byte range runs
    /// past the end of the data file is reported by name.
    pub fn read(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format != FORMAT {
            return Err(Error::Parse(format!(
                "unsupported tensor format `{}` (expected {FORMAT})",
                manifest.format
            )));
        }
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let data_path = dir.join(&manifest.data);
        let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let mut out = TensorFile {
            meta: manifest.meta.clone(),
            ..Default::default()
        };
        for entry in manifest.tensors {
            let count: usize = entry.shape.iter().product();
            let start = usize::try_from(entry.offset)
                .map_err(|_| Error::Parse(format!("offset of `{}` too large", entry.name)))?;
            let end = start + count * 8;
            if end > bytes.len() {
                return Err(Error::MissingTensor(format!(
                    "{} (needs bytes {start}..{end}, data file has {})",
                    entry.name,
                    bytes.len()
                )));
            }
            let data = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            out.insert(entry.name, entry.shape, data);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut tf = TensorFile::new();
        tf.insert("a", vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]);
        tf.insert("b", vec![3], vec![1.0, 2.0, 3.0]);
        let path = dir.path().join("m.json");
        tf.write(&path, "m.bin").unwrap();
        let back = TensorFile::read(&path).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["a", "b"]);
        let (_, a) = back.get("a").unwrap();
        assert_eq!(a[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, tf);
    }

    #[test]
    fn truncated_data_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let mut tf = TensorFile::new();
        tf.insert("first", vec![2], vec![1.0, 2.0]);
        tf.insert("second", vec![4], vec![1.0; 4]);
        let path = dir.path().join("m.json");
        tf.write(&path, "m.bin").unwrap();
        let bin = dir.path().join("m.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        let err = TensorFile::read(&path).unwrap_err();
        assert!(err.to_string().contains("second"), "{err}");
    }
}
