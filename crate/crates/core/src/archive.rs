//! Named-tensor archive shared by model checkpoints and extractor weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   b"NVTA"
//! version    u32       ARCHIVE_VERSION
//! header_len u64       length of the JSON header in bytes
//! header     JSON      {"meta": {...}, "tensors": [{"name", "shape", "offset", "length"}]}
//! payload    f32 LE    tensors back to back; offset/length counted in elements
//! digest     32 bytes  SHA-256 over every preceding byte
//! ```
//!
//! Tensor names are stable dotted paths such as `encoder.conv0.weight` or
//! `decoder.bn2.running_var`, so checkpoints can be read by any implementation
//! that follows this layout.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"NVTA";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn encode_archive(meta: &serde_json::Value, tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Shape(format!(
                "tensor {} declares shape {:?} but holds {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            length: t.data.len(),
        });
        offset += t.data.len();
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
    })
    .map_err(|e| Error::Format(format!("header serialization: {e}")))?;

    let mut bytes = Vec::with_capacity(16 + header.len() + offset * 4 + 32);
    bytes.extend_from_slice(ARCHIVE_MAGIC);
    bytes.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for t in tensors {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    Ok(bytes)
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < 16 + 32 {
        return Err(Error::Format("archive truncated".into()));
    }
    if &bytes[..4] != ARCHIVE_MAGIC {
        return Err(Error::Format("bad archive magic".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format(
            "archive checksum mismatch (corrupted or truncated)".into(),
        ));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != ARCHIVE_VERSION {
        return Err(Error::Format(format!(
            "archive version {version} unsupported (expected {ARCHIVE_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Format("archive header truncated".into()))?;
    let header: Header = serde_json::from_slice(&body[16..header_end])
        .map_err(|e| Error::Format(format!("archive header: {e}")))?;
    let payload = &body[header_end..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let start = entry.offset * 4;
        let end = start + entry.length * 4;
        if end > payload.len() || entry.shape.iter().product::<usize>() != entry.length {
            return Err(Error::Format(format!(
                "tensor {} payload truncated",
                entry.name
            )));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(NamedTensor {
            name: entry.name,
            shape: entry.shape,
            data,
        });
    }
    Ok(Archive {
        meta: header.meta,
        tensors,
    })
}

/// Writes atomically (temporary file + rename).
pub fn write_archive(path: &Path, meta: &serde_json::Value, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode_archive(meta, tensors)?;
    write_atomic(path, &bytes)
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(parent) = parent {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor::new("a.weight", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]),
            NamedTensor::new("a.bias", vec![2], vec![0.25, -0.5]),
        ]
    }

    #[test]
    fn every_single_byte_corruption_is_detected() {
        let bytes = encode_archive(&serde_json::json!({"k": 1}), &sample()).unwrap();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(decode_archive(&bad).is_err(), "flip at byte {i} undetected");
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode_archive(&serde_json::json!({}), &sample()).unwrap();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_archive(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
    }

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-1e6f32..1e6, 1..64), name in "[a-z]{1,8}") {
            let n = values.len();
            let tensors = vec![NamedTensor::new(name.clone(), vec![n], values)];
            let meta = serde_json::json!({"epoch": 3});
            let back = decode_archive(&encode_archive(&meta, &tensors).unwrap()).unwrap();
            prop_assert_eq!(back.tensors, tensors);
            prop_assert_eq!(back.meta, meta);
        }
    }
}
