//! Self-describing checkpoint archive.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (architecture, training record, tensor table, payload digest),
//! then every tensor as little-endian `f64` in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{ArchDescriptor, ToyDetector};
use super::train::TrainingRecord;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MTTACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct DetectorCheckpoint {
    pub model: ToyDetector,
    pub training: Option<TrainingRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: ArchDescriptor,
    training: Option<TrainingRecord>,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_checkpoint(model: &ToyDetector, training: Option<&TrainingRecord>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for p in model.param_refs() {
        let data = model.tensor(p);
        tensors.push(TensorEntry {
            name: p.name(),
            shape: model.shape_of(p),
            offset: payload.len() / 8,
            len: data.len(),
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        arch: model.arch().clone(),
        training: training.cloned(),
        tensors,
        payload_sha256: to_hex(&Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(model: &ToyDetector, training: Option<&TrainingRecord>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, training)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint of the reference toy architecture.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DetectorCheckpoint> {
    load_checkpoint_with(path, &ArchDescriptor::default())
}

/// Loads a checkpoint, rejecting it unless it was written for `expected`.
pub fn load_checkpoint_with(path: impl AsRef<Path>, expected: &ArchDescriptor) -> Result<DetectorCheckpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected).map_err(|reason| Error::Checkpoint { path: path.to_path_buf(), reason })
}

pub fn decode_checkpoint(bytes: &[u8], expected: &ArchDescriptor) -> std::result::Result<DetectorCheckpoint, String> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err("not a detector checkpoint (bad magic or truncated preamble)".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(format!("format version {version} is not supported (expected {FORMAT_VERSION})"));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or("truncated header")?;
    let header: Header =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| format!("malformed header: {e}"))?;
    if header.format_version != version {
        return Err("header and preamble disagree on format version".into());
    }
    if &header.arch != expected {
        return Err(format!("architecture mismatch: checkpoint has {:?}, expected {:?}", header.arch, expected));
    }
    let payload = &bytes[header_end..];
    if to_hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(format!("payload digest mismatch ({} payload bytes); file truncated or corrupt", payload.len()));
    }
    let mut model = ToyDetector::new(header.arch.clone(), 0).map_err(|e| e.to_string())?;
    let refs = model.param_refs();
    if refs.len() != header.tensors.len() {
        return Err(format!("expected {} tensors, found {}", refs.len(), header.tensors.len()));
    }
    for (p, entry) in refs.into_iter().zip(&header.tensors) {
        if entry.name != p.name() || entry.shape != model.shape_of(p) {
            return Err(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                p.name(),
                model.shape_of(p)
            ));
        }
        let start = entry.offset * 8;
        let end = start + entry.len * 8;
        let raw = payload.get(start..end).ok_or_else(|| format!("tensor {} out of bounds", entry.name))?;
        let dst = model.tensor_mut(p);
        if dst.len() != entry.len {
            return Err(format!("tensor {} has wrong length", entry.name));
        }
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok(DetectorCheckpoint { model, training: header.training })
}
