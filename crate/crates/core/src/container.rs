//! The `.fvt` raw tensor container.
//!
//! ```text
//! "FVGT" | u32 version | u32 header_len | JSON {dtype, shape} | payload | u32 crc32(payload)
//! ```
//! All integers little-endian; the payload is IEEE-754 `f32` little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"FVGT";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
}

/// Shared framing: magic, version, JSON header, payload, CRC32.
pub(crate) fn frame_container(magic: &[u8; 4], version: u32, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out
}

/// Splits a container into `(header, payload)` after checking magic, version
/// and checksum. `payload_len` maps the parsed header to the expected size.
pub(crate) fn unframe_container<'a, H: for<'de> Deserialize<'de>>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u32,
    payload_len: impl FnOnce(&H) -> Result<usize>,
) -> Result<(H, &'a [u8])> {
    if bytes.len() < 12 {
        return Err(short(bytes, 12));
    }
    if &bytes[..4] != magic {
        return Err(Error::format("magic", format!("expected {:?}, found {:?}", magic, &bytes[..4])));
    }
    let ver = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if ver != version {
        return Err(Error::format("version", format!("expected {version}, found {ver}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let hend = 12usize.checked_add(hlen).ok_or_else(|| Error::format("header_len", "overflow"))?;
    if bytes.len() < hend {
        return Err(short(bytes, hend));
    }
    let header: H = serde_json::from_slice(&bytes[12..hend]).map_err(|e| Error::format("header", e.to_string()))?;
    let plen = payload_len(&header)?;
    let pend = hend + plen;
    if bytes.len() < pend + 4 {
        return Err(short(&bytes[hend.min(bytes.len())..], plen + 4));
    }
    if bytes.len() > pend + 4 {
        return Err(Error::format("payload", format!("{} trailing bytes", bytes.len() - pend - 4)));
    }
    let payload = &bytes[hend..pend];
    let stored = u32::from_le_bytes(bytes[pend..pend + 4].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok((header, payload))
}

/// A file that ends early cannot have a valid checksum.
fn short(available: &[u8], _needed: usize) -> Error {
    Error::Checksum { stored: 0, computed: crc32fast::hash(available) }
}

pub fn encode_tensor(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Shape(format!("shape {shape:?} holds {n} values, got {}", data.len())));
    }
    let header = serde_json::to_vec(&TensorHeader { dtype: "f32le".into(), shape: shape.to_vec() })?;
    let mut payload = Vec::with_capacity(4 * data.len());
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    Ok(frame_container(TENSOR_MAGIC, TENSOR_VERSION, &header, &payload))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let (header, payload) = unframe_container::<TensorHeader>(bytes, TENSOR_MAGIC, TENSOR_VERSION, |h| {
        if h.dtype != "f32le" {
            return Err(Error::format("dtype", format!("unsupported {}", h.dtype)));
        }
        h.shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("shape", "overflow"))
    })?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((header.shape, data))
}

pub fn write_tensor(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode_tensor(shape, data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
