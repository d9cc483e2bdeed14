//! Named-tensor archive (NTA).
//!
//! Layout: the magic `NTA1`, a compact JSON index
//! `{name: {"dtype", "shape", "offset", "length"}}`, then the little-endian
//! payloads. `offset` and `length` are byte positions relative to the first
//! byte after the index.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NTA1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

pub fn encode(params: &ParameterStore, dtype: DType) -> Vec<u8> {
    let mut index = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in params.iter() {
        let offset = payload.len();
        match dtype {
            DType::F32 => t.data().iter().for_each(|&v| payload.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => t.data().iter().for_each(|&v| payload.extend_from_slice(&v.to_le_bytes())),
        }
        let entry = IndexEntry { dtype, shape: t.shape().to_vec(), offset, length: payload.len() - offset };
        index.insert(name.to_string(), entry);
    }
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&index).expect("index serializes"));
    out.extend(payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<ParameterStore> {
    let body = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| Error::CorruptArchive("missing NTA1 magic".into()))?;
    let mut stream = serde_json::Deserializer::from_slice(body).into_iter::<BTreeMap<String, IndexEntry>>();
    let index = match stream.next() {
        Some(Ok(index)) => index,
        Some(Err(e)) => return Err(Error::CorruptArchive(format!("index: {e}"))),
        None => return Err(Error::CorruptArchive("missing index".into())),
    };
    let payload = &body[stream.byte_offset()..];
    let mut store = ParameterStore::new();
    for (name, e) in index {
        let count: usize = e.shape.iter().product();
        if e.length != count * e.dtype.size() {
            return Err(Error::CorruptArchive(format!("`{name}`: length {} does not match shape", e.length)));
        }
        let raw = e
            .offset
            .checked_add(e.length)
            .and_then(|end| payload.get(e.offset..end))
            .ok_or_else(|| Error::CorruptArchive(format!("`{name}`: payload out of bounds")))?;
        let data: Vec<f64> = match e.dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        let t = Tensor::from_vec(&e.shape, data).map_err(|e| Error::CorruptArchive(e.to_string()))?;
        store.insert(&name, t).map_err(|e| Error::CorruptArchive(e.to_string()))?;
    }
    Ok(store)
}

pub fn write(params: &ParameterStore, path: &Path, dtype: DType) -> Result<()> {
    std::fs::write(path, encode(params, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<ParameterStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
