//! Container of named float64 arrays.
//!
//! Layout: an 8-byte little-endian header length, a JSON header mapping each
//! array name to `{"dtype": "F64", "shape": [...], "data_offsets": [start, end]}`
//! (plus an optional `"__metadata__"` string map), then the raw little-endian
//! array bytes. Offsets are relative to the start of the data section. The
//! layout is readable by `safetensors` loaders.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.arrays.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Parse(format!("checkpoint has no array named {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.into(),
                serde_json::to_value(&self.metadata).expect("string map"),
            );
        }
        let mut offset = 0;
        for (name, t) in &self.arrays {
            let len = t.numel() * 8;
            let entry = Entry {
                dtype: "F64".into(),
                shape: t.shape().to_vec(),
                data_offsets: [offset, offset + len],
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry"));
            offset += len;
        }
        let mut header = serde_json::to_vec(&header).expect("header");
        while (header.len() + 8) % 8 != 0 {
            header.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.arrays.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Parse("checkpoint truncated".into());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(short)?.try_into().expect("8 bytes");
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header = bytes.get(8..8 + header_len).ok_or_else(short)?;
        let data = &bytes[8 + header_len..];
        let header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(header)?;
        let mut ckpt = Checkpoint::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                ckpt.metadata = serde_json::from_value(value)?;
                continue;
            }
            let entry: Entry = serde_json::from_value(value)?;
            if entry.dtype != "F64" {
                return Err(Error::Parse(format!("{name}: unsupported dtype {}", entry.dtype)));
            }
            let [start, end] = entry.data_offsets;
            let n: usize = entry.shape.iter().product();
            if end < start || end - start != n * 8 {
                return Err(Error::Parse(format!("{name}: offsets do not match shape")));
            }
            let raw = data.get(start..end).ok_or_else(short)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(entry.shape, values).map_err(|e| Error::Parse(format!("{name}: {e}")))?;
            ckpt.arrays.insert(name, t);
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
