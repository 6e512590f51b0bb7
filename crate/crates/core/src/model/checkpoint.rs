//! Binary checkpoint layout:
//!
//! ```text
//! "JMBACKPT"                 8 bytes
//! version                    u32 LE (1)
//! header length              u64 LE
//! header                     UTF-8 JSON {config, tensors: {name: {dtype, shape, offset, length}}}
//! zero padding               up to the next multiple of 64 from the file start
//! payload                    little-endian tensors in header order
//! ```
//!
//! `offset` and `length` are in bytes, relative to the start of the payload.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::JambaModel;
use crate::config::JambaConfig;
use crate::error::{Error, Result};
use crate::numerics::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"JMBACKPT";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub config: JambaConfig,
    pub tensors: Vec<(String, TensorEntry)>,
}

impl CheckpointHeader {
    /// Element type shared by every tensor, if the file is homogeneous.
    pub fn dtype(&self) -> Option<DType> {
        let first = self.tensors.first()?.1.dtype;
        self.tensors.iter().all(|(_, e)| e.dtype == first).then_some(first)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    config: JambaConfig,
    tensors: serde_json::Map<String, serde_json::Value>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn to_bytes<T: Real>(model: &JambaModel<T>) -> Vec<u8> {
    let mut index = serde_json::Map::new();
    let mut offset = 0u64;
    let named = model.weights.named();
    for (name, t) in &named {
        let length = (t.numel() * T::DTYPE.size_of()) as u64;
        let entry = TensorEntry { dtype: T::DTYPE, shape: t.shape().to_vec(), offset, length };
        index.insert(name.clone(), serde_json::to_value(entry).expect("serializable"));
        offset += length;
    }
    let header = serde_json::to_vec(&RawHeader { config: model.config().clone(), tensors: index })
        .expect("serializable header");

    let start = (PREAMBLE + header.len()).div_ceil(ALIGN) * ALIGN;
    let mut out = Vec::with_capacity(start + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.resize(start, 0);
    for (_, t) in &named {
        out.extend_from_slice(&t.le_bytes());
    }
    out
}

/// Parses the preamble and header; returns the header and the payload offset.
fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err("header length exceeds file"))?;
    let raw: RawHeader =
        serde_json::from_slice(&bytes[PREAMBLE..hend]).map_err(|e| format_err(format!("header: {e}")))?;
    let start = hend.div_ceil(ALIGN) * ALIGN;
    if start > bytes.len() || bytes[hend..start].iter().any(|&b| b != 0) {
        return Err(format_err("padding is missing or nonzero"));
    }
    let tensors = raw
        .tensors
        .into_iter()
        .map(|(k, v)| Ok((k, serde_json::from_value(v).map_err(|e| format_err(format!("tensor entry: {e}")))?)))
        .collect::<Result<Vec<(String, TensorEntry)>>>()?;
    Ok((CheckpointHeader { config: raw.config, tensors }, start))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(parse_header(&std::fs::read(path)?)?.0)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<JambaModel<T>> {
    let (header, start) = parse_header(bytes)?;
    let payload = &bytes[start..];
    let shell = super::layout(&header.config)?;
    let expected = shell.named();
    if expected.len() != header.tensors.len() {
        return Err(format_err(format!("{} tensors, expected {}", header.tensors.len(), expected.len())));
    }
    let mut cursor = 0u64;
    let mut loaded = Vec::with_capacity(expected.len());
    for ((want_name, want_shape), (name, e)) in expected.iter().zip(&header.tensors) {
        if want_name != name || want_shape.as_slice() != e.shape.as_slice() {
            return Err(format_err(format!("tensor {name} {:?}, expected {want_name} {want_shape:?}", e.shape)));
        }
        if e.dtype != T::DTYPE {
            return Err(format_err(format!("tensor {name} is {}, expected {}", e.dtype.name(), T::DTYPE.name())));
        }
        let numel: usize = e.shape.iter().product();
        if e.offset != cursor || e.length != (numel * T::DTYPE.size_of()) as u64 {
            return Err(format_err(format!("tensor {name} has inconsistent offset or length")));
        }
        let end = e.offset + e.length;
        if end > payload.len() as u64 {
            return Err(format_err(format!("tensor {name} runs past end of file")));
        }
        loaded.push(Tensor::from_le_bytes(&e.shape, &payload[e.offset as usize..end as usize])?);
        cursor = end;
    }
    if cursor != payload.len() as u64 {
        return Err(format_err("trailing bytes after payload"));
    }
    JambaModel::from_weights(&header.config, shell.replace(&loaded))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save<T: Real>(model: &JambaModel<T>, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model))
}

pub fn load<T: Real>(path: &Path) -> Result<JambaModel<T>> {
    from_bytes(&std::fs::read(path)?)
}
