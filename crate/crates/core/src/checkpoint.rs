//! Versioned binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! "ELCK"                      4 bytes
//! version                     u16 little-endian
//! header length               u32 little-endian
//! header                      UTF-8 JSON
//! payload                     f32 little-endian, tensors back to back
//! ```
//!
//! The header is `{"fingerprint", "metadata", "tensors": [{"name", "shape",
//! "kind", "offset", "len"}]}` where `offset` is the byte offset of the
//! tensor inside the payload and `len` its element count. Values are stored
//! as f32; loading widens them back to f64.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::module::{Module, ParamKind};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ELCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    fingerprint: String,
    metadata: serde_json::Value,
    tensors: Vec<EntryHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Captures every parameter and buffer of `model`, narrowed to f32.
    pub fn from_module(model: &dyn Module, fingerprint: &str, metadata: serde_json::Value) -> Self {
        let mut tensors = Vec::new();
        model.visit(&mut |p| {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                kind: p.kind,
                data: p.tensor.data().iter().map(|&v| v as f32).collect(),
            })
        });
        Self {
            fingerprint: fingerprint.to_string(),
            metadata,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = EntryHeader {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    kind: t.kind,
                    offset,
                    len: t.data.len(),
                };
                offset += 4 * t.data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            fingerprint: self.fingerprint.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Checkpoint("header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(10 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Checkpoint("truncated file".into());
        if bytes.get(..4).ok_or_else(truncated)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(
            bytes
                .get(4..6)
                .ok_or_else(truncated)?
                .try_into()
                .expect("2 bytes"),
        );
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unknown format version {version}"
            )));
        }
        let len = u32::from_le_bytes(
            bytes
                .get(6..10)
                .ok_or_else(truncated)?
                .try_into()
                .expect("4 bytes"),
        ) as usize;
        let header: Header = serde_json::from_slice(bytes.get(10..10 + len).ok_or_else(truncated)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let payload = &bytes[10 + len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for e in header.tensors {
            if e.shape.iter().product::<usize>() != e.len || e.offset != expected_offset {
                return Err(Error::Checkpoint(format!("inconsistent entry {}", e.name)));
            }
            let raw = payload
                .get(e.offset..e.offset + 4 * e.len)
                .ok_or_else(truncated)?;
            expected_offset += 4 * e.len;
            tensors.push(TensorEntry {
                name: e.name,
                shape: e.shape,
                kind: e.kind,
                data: raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            });
        }
        if payload.len() != expected_offset {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self {
            fingerprint: header.fingerprint,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Writes every stored tensor into `model`.
    ///
    /// Refuses a fingerprint other than `expected` and any difference in
    /// the set of names or shapes.
    pub fn apply(&self, model: &mut dyn Module, expected: &str) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::Checkpoint(format!(
                "fingerprint mismatch: checkpoint {}, model {expected}",
                self.fingerprint
            )));
        }
        let mut by_name: BTreeMap<&str, &TensorEntry> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut err = None;
        model.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match by_name.remove(p.name.as_str()) {
                Some(t) if t.shape == p.tensor.shape() && t.kind == p.kind => {
                    let trainable = p.tensor.requires_grad();
                    let data = t.data.iter().map(|&v| f64::from(v)).collect();
                    p.tensor = Tensor::new(t.shape.clone(), data)
                        .expect("shape checked")
                        .with_requires_grad(trainable);
                }
                Some(t) => {
                    err = Some(format!(
                        "{}: stored {:?}, model {:?}",
                        p.name,
                        t.shape,
                        p.tensor.shape()
                    ))
                }
                None => err = Some(format!("{} missing from checkpoint", p.name)),
            }
        });
        if let Some(msg) = err {
            return Err(Error::Checkpoint(msg));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}
