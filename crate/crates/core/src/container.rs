//! The `DSPA` tensor container shared by SAE parameter files and activation
//! traces.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DSPA" | u32 version (=1) | u64 header_len | header JSON (UTF-8) | tensor data
//! ```
//!
//! The header is a JSON object mapping each tensor name to
//! `{"dtype": "f32", "shape": [..], "offset": <bytes from data start>}`.
//! The reserved key `"__metadata__"` holds an arbitrary JSON object owned by
//! the file kind (activation rule, layer tag, token counts, ...). Tensor data
//! is contiguous row-major IEEE-754 binary32.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{DspaError, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"DSPA";
pub const CONTAINER_VERSION: u32 = 1;
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: Map<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| DspaError::MalformedHeader(format!("missing tensor {name:?}")))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| DspaError::MalformedHeader(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        header.insert(METADATA_KEY.into(), Value::Object(self.metadata.clone()));
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let entry = TensorEntry {
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset,
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry serializes"));
            offset += 4 * t.data.len() as u64;
        }
        let header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");

        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.take(4)?;
        if magic != CONTAINER_MAGIC {
            return Err(DspaError::BadMagic {
                expected: "DSPA".into(),
                found: magic.to_vec(),
            });
        }
        let version = cur.u32()?;
        if version != CONTAINER_VERSION {
            return Err(DspaError::UnsupportedVersion(version));
        }
        let header_len = cur.u64()? as usize;
        let header: Value = serde_json::from_slice(cur.take(header_len)?)
            .map_err(|e| DspaError::MalformedHeader(e.to_string()))?;
        let Value::Object(mut header) = header else {
            return Err(DspaError::MalformedHeader("header is not a JSON object".into()));
        };
        let metadata = match header.remove(METADATA_KEY) {
            Some(Value::Object(m)) => m,
            Some(_) => return Err(DspaError::MalformedHeader("__metadata__ is not an object".into())),
            None => Map::new(),
        };
        let data = cur.rest();

        let mut tensors = BTreeMap::new();
        for (name, value) in header {
            let entry: TensorEntry = serde_json::from_value(value)
                .map_err(|e| DspaError::MalformedHeader(format!("tensor {name:?}: {e}")))?;
            if entry.dtype != "f32" {
                return Err(DspaError::MalformedHeader(format!(
                    "tensor {name:?}: unsupported dtype {:?}",
                    entry.dtype
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start
                .checked_add(numel * 4)
                .ok_or(DspaError::UnexpectedEof)?;
            if end > data.len() {
                return Err(DspaError::UnexpectedEof);
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(entry.shape, values));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub(crate) fn meta_usize(&self, key: &str) -> Result<usize> {
        self.metadata
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| DspaError::MalformedHeader(format!("metadata field {key:?} missing or not an integer")))
    }

    pub(crate) fn meta_str(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| DspaError::MalformedHeader(format!("metadata field {key:?} missing or not a string")))
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(DspaError::MissingFile(path.to_path_buf()))
        }
        Err(e) => Err(e.into()),
    }
}

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(DspaError::UnexpectedEof)?;
        if end > self.bytes.len() {
            return Err(DspaError::UnexpectedEof);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
