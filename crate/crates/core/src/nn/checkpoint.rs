//! Versioned binary checkpoint container.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic   8 bytes  "CONDAUG\0"
//! version u32      currently 1
//! hlen    u64      length of the JSON header
//! header  hlen     {"kind", "meta", "tensors": [{"name", "rows", "cols"}]}
//! data             f64 values of each tensor, row major, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::Mat;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CONDAUG\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `store`, names prefixed by `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    pub fn push_tensors<'a>(
        &mut self,
        prefix: &str,
        named: impl IntoIterator<Item = (&'a str, &'a Mat)>,
    ) {
        for (name, t) in named {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies `prefix`-named tensors into `store`. Every parameter must be
    /// present with its exact shape.
    pub fn restore_into(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let tensor = self
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let expected = store.get(id).dim();
            if tensor.dim() != expected {
                return Err(Error::ShapeMismatch {
                    name,
                    expected,
                    found: tensor.dim(),
                });
            }
            store.get_mut(id).assign(tensor);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let data_len: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + header.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        let mut offset = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n = entry.rows * entry.cols;
            let end = offset + n * 8;
            if end > bytes.len() {
                return Err(bad("truncated tensor data"));
            }
            let values: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset = end;
            let t = Mat::from_shape_vec((entry.rows, entry.cols), values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.push((entry.name, t));
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(content_hash(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn hash(&self) -> String {
        content_hash(&self.to_bytes())
    }
}

/// Short SHA-256 hex digest identifying a checkpoint.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_and_shape_checks() {
        let mut store = ParamStore::new();
        store.add("a", array![[1.0, 2.0], [3.0, f64::MIN_POSITIVE]]);
        store.add("b", array![[-0.5]]);
        let mut ck = Checkpoint::new("test", serde_json::json!({"x": 1}));
        ck.push_store("p.", &store);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);

        let mut fresh = ParamStore::new();
        fresh.add("a", Mat::zeros((2, 2)));
        fresh.add("b", Mat::zeros((1, 1)));
        back.restore_into("p.", &mut fresh).unwrap();
        assert_eq!(fresh, store);

        let mut wrong = ParamStore::new();
        wrong.add("a", Mat::zeros((2, 3)));
        assert!(matches!(
            back.restore_into("p.", &mut wrong),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut missing = ParamStore::new();
        missing.add("c", Mat::zeros((1, 1)));
        assert!(matches!(
            back.restore_into("p.", &mut missing),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"hello").is_err());
        let mut bytes = Checkpoint::new("k", serde_json::Value::Null).to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
