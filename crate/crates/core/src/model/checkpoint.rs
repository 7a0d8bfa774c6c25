//! `FVGC` checkpoint container: magic, u32 version, u32 header length, JSON
//! header `{config, meta, tensors: name → {dtype, shape, offset}}`, raw
//! little-endian payload, CRC32 of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LoraAdapters, ModelConfig, Params, Real};
use crate::container::{frame_container, unframe_container};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FVGC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `"base"` or `"lora"`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Base weights and/or adapters together with the config they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: Option<Params<T>>,
    pub adapters: Option<LoraAdapters<T>>,
}

/// Parameters loaded in whatever precision they were stored in.
pub enum LoadedParams {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl<T: Real> Checkpoint<T> {
    pub fn cast<U: Real>(&self) -> Checkpoint<U> {
        Checkpoint {
            config: self.config.clone(),
            meta: self.meta.clone(),
            params: self.params.as_ref().map(Params::cast),
            adapters: self.adapters.as_ref().map(LoraAdapters::cast),
        }
    }

    /// Fails with a format error naming the first config field that differs.
    pub fn expect_config(&self, want: &ModelConfig) -> Result<()> {
        let a = serde_json::to_value(&self.config)?;
        let b = serde_json::to_value(want)?;
        if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
            for (k, v) in b {
                if a.get(k) != Some(v) {
                    return Err(Error::format(k.clone(), format!("checkpoint has {:?}, expected {v}", a.get(k))));
                }
            }
        }
        Ok(())
    }
}

pub fn write_checkpoint_bytes<T: Real>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let mut payload = Vec::new();
    let mut push = |name: String, t: &Array2<T>| {
        tensors.insert(
            name,
            TensorEntry { dtype: T::DTYPE.into(), shape: vec![t.nrows(), t.ncols()], offset: payload.len() },
        );
        for &v in t.iter() {
            v.write_le(&mut payload);
        }
    };
    if let Some(p) = &ck.params {
        for (n, t) in p.tensors() {
            push(n, t);
        }
    }
    if let Some(l) = &ck.adapters {
        for (n, t) in l.tensors() {
            push(n, t);
        }
    }
    let header = serde_json::to_vec(&Header { config: ck.config.clone(), meta: ck.meta.clone(), tensors })?;
    Ok(frame_container(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &payload))
}

fn fill<T: Real>(
    name: &str,
    dst: &mut Array2<T>,
    table: &BTreeMap<String, TensorEntry>,
    payload: &[u8],
    used: &mut usize,
) -> Result<()> {
    let e = table.get(name).ok_or_else(|| Error::format(name, "tensor missing from checkpoint"))?;
    if e.dtype != T::DTYPE {
        return Err(Error::format(name, format!("dtype {}, expected {}", e.dtype, T::DTYPE)));
    }
    if e.shape != [dst.nrows(), dst.ncols()] {
        return Err(Error::format(
            name,
            format!("shape {:?}, expected {:?}", e.shape, [dst.nrows(), dst.ncols()]),
        ));
    }
    let end = e.offset + dst.len() * T::BYTES;
    if end > payload.len() {
        return Err(Error::format(name, "offset beyond payload"));
    }
    for (v, c) in dst.iter_mut().zip(payload[e.offset..end].chunks_exact(T::BYTES)) {
        *v = T::read_le(c);
    }
    *used += 1;
    Ok(())
}

pub fn read_checkpoint_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, payload) = unframe_container::<Header>(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, |h| {
        Ok(h
            .tensors
            .values()
            .map(|e| e.offset + e.shape.iter().product::<usize>() * dtype_bytes(&e.dtype))
            .max()
            .unwrap_or(0))
    })?;
    header.config.validate()?;
    let table = &header.tensors;
    let mut used = 0;
    let params = if table.contains_key("patch_w") {
        let mut p = Params::<T>::zeros(&header.config);
        for (n, t) in p.tensors_mut() {
            fill(&n, t, table, payload, &mut used)?;
        }
        Some(p)
    } else {
        None
    };
    let adapters = match header.meta.lora_rank {
        Some(rank) => {
            let zeros = Params::<T>::zeros(&header.config);
            let mut l = LoraAdapters::init(&zeros, rank, header.meta.lora_alpha.unwrap_or(rank as f64), 0);
            for (n, t) in l.tensors_mut() {
                fill(&n, t, table, payload, &mut used)?;
            }
            Some(l)
        }
        None => None,
    };
    if used != table.len() {
        return Err(Error::format("tensors", format!("{} unexpected tensors", table.len() - used)));
    }
    Ok(Checkpoint { config: header.config, meta: header.meta, params, adapters })
}

fn dtype_bytes(d: &str) -> usize {
    match d {
        "f64le" => 8,
        _ => 4,
    }
}

pub fn save_checkpoint<T: Real>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = write_checkpoint_bytes(ck)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint in its stored precision.
pub fn load_checkpoint(path: &Path) -> Result<LoadedParams> {
    parse_any(&read_file(path)?)
}

impl LoadedParams {
    pub fn config(&self) -> &ModelConfig {
        match self {
            LoadedParams::F32(c) => &c.config,
            LoadedParams::F64(c) => &c.config,
        }
    }

    /// The checkpoint converted to `T`, whatever it was stored as.
    pub fn into_precision<T: Real>(self) -> Checkpoint<T> {
        match self {
            LoadedParams::F32(c) => c.cast(),
            LoadedParams::F64(c) => c.cast(),
        }
    }
}

fn parse_any(bytes: &[u8]) -> Result<LoadedParams> {
    // Peek at one dtype; a checkpoint is homogeneous.
    match read_checkpoint_bytes::<f32>(bytes) {
        Err(Error::Format { detail, .. }) if detail.starts_with("dtype f64le") => {
            Ok(LoadedParams::F64(read_checkpoint_bytes(bytes)?))
        }
        other => Ok(LoadedParams::F32(other?)),
    }
}

/// Hex SHA-256 of a checkpoint file; adapters record the hash of their base.
pub fn base_hash(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    Ok(hex_digest(&bytes))
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_adapters<T: Real>(
    adapters: &LoraAdapters<T>,
    config: &ModelConfig,
    base_hash: &str,
    mut meta: CheckpointMeta,
    path: &Path,
) -> Result<()> {
    meta.kind = "lora".into();
    meta.base_hash = Some(base_hash.to_owned());
    meta.lora_rank = Some(adapters.rank);
    meta.lora_alpha = Some(adapters.alpha);
    save_checkpoint(&Checkpoint { config: config.clone(), meta, params: None, adapters: Some(adapters.clone()) }, path)
}

/// Loads adapters (converted to `T`), refusing them if they were trained
/// against another base.
pub fn load_adapters<T: Real>(path: &Path, expected_base_hash: &str) -> Result<(LoraAdapters<T>, CheckpointMeta)> {
    let ck = parse_any(&read_file(path)?)?.into_precision::<T>();
    let recorded = ck.meta.base_hash.clone().unwrap_or_default();
    if recorded != expected_base_hash {
        return Err(Error::HashMismatch { expected: recorded, actual: expected_base_hash.to_owned() });
    }
    let adapters = ck.adapters.ok_or_else(|| Error::format("lora", "checkpoint carries no adapters"))?;
    adapters.check_shapes(&ck.config)?;
    Ok((adapters, ck.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { embed_dim: 16, heads: 2, patch: 8, ..Default::default() }
    }

    fn base_ck() -> Checkpoint<f32> {
        let cfg = small();
        Checkpoint {
            params: Some(Params::init(&cfg, 1)),
            config: cfg,
            meta: CheckpointMeta { kind: "base".into(), steps: Some(3), final_loss: Some(0.25), ..Default::default() },
            adapters: None,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = base_ck();
        let a = write_checkpoint_bytes(&ck).unwrap();
        let back = read_checkpoint_bytes::<f32>(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(write_checkpoint_bytes(&back).unwrap(), a);
        assert_eq!(&a[..4], b"FVGC");
    }

    #[test]
    fn f64_checkpoints_round_trip_through_load() {
        let cfg = small();
        let ck = Checkpoint::<f64> {
            params: Some(Params::init(&cfg, 2)),
            config: cfg,
            meta: CheckpointMeta { kind: "base".into(), ..Default::default() },
            adapters: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.fvgc");
        save_checkpoint(&ck, &p).unwrap();
        match load_checkpoint(&p).unwrap() {
            LoadedParams::F64(back) => assert_eq!(back, ck),
            LoadedParams::F32(_) => panic!("precision lost"),
        }
    }

    #[test]
    fn mismatched_embed_dim_names_the_field() {
        let ck = base_ck();
        let want = ModelConfig { embed_dim: 32, ..small() };
        match ck.expect_config(&want) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "embed_dim"),
            other => panic!("{other:?}"),
        }
        // a header that claims another width no longer matches the tensor table
        let bytes = write_checkpoint_bytes(&ck).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + hlen]).unwrap().replace("\"embed_dim\":16", "\"embed_dim\":32");
        let mut tampered = bytes[..8].to_vec();
        tampered.extend_from_slice(&(header.len() as u32).to_le_bytes());
        tampered.extend_from_slice(header.as_bytes());
        tampered.extend_from_slice(&bytes[12 + hlen..]);
        assert!(matches!(read_checkpoint_bytes::<f32>(&tampered), Err(Error::Format { field, .. }) if field == "patch_w"));
    }

    #[test]
    fn truncated_checkpoint_is_a_checksum_error() {
        let bytes = write_checkpoint_bytes(&base_ck()).unwrap();
        for cut in [1, 5, 100] {
            let r = read_checkpoint_bytes::<f32>(&bytes[..bytes.len() - cut]);
            assert!(matches!(r, Err(Error::Checksum { .. })), "cut {cut}: {r:?}");
        }
    }

    #[test]
    fn adapters_are_bound_to_their_base() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("base.fvgc");
        let ck = base_ck();
        save_checkpoint(&ck, &base).unwrap();
        let h = base_hash(&base).unwrap();
        let l = LoraAdapters::init(ck.params.as_ref().unwrap(), 4, 4.0, 9);
        let lp = dir.path().join("lora.fvgc");
        save_adapters(&l, &ck.config, &h, CheckpointMeta::default(), &lp).unwrap();
        let (back, meta) = load_adapters::<f32>(&lp, &h).unwrap();
        assert_eq!(back, l);
        assert_eq!(meta.lora_rank, Some(4));
        assert!(matches!(load_adapters::<f32>(&lp, "deadbeef"), Err(Error::HashMismatch { .. })));
        assert!(matches!(load_adapters::<f32>(&dir.path().join("nope"), &h), Err(Error::MissingArtifact(_))));
    }
}
