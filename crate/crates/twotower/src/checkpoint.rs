//! Encoder checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header (mode, encoder config, tensor names and shapes), the tensors as
//! little-endian `f32` in header order, and a trailing FNV-1a checksum.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use twotower_core::encoder::{EncoderConfig, EncoderParams, TowerMode};

use crate::codec::{self, Reader, Writer};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"TTCKPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub mode: TowerMode,
    pub config: EncoderConfig,
    pub epoch: Option<usize>,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint is truncated or its checksum does not match")]
    Corrupt,
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint tensors do not match its config: {0}")]
    Shape(String),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: EncoderParams<f32>,
    pub epoch: Option<usize>,
    /// Hex FNV-1a of the file bytes. Index files record it.
    pub fingerprint: String,
}

pub fn encode(params: &EncoderParams<f32>, epoch: Option<usize>) -> Vec<u8> {
    let tensors = params.tensors();
    let header = Header {
        format_version: FORMAT_VERSION,
        mode: params.mode(),
        config: params.config.clone(),
        epoch,
        tensors: tensors.iter().map(|(name, shape, _)| TensorInfo { name: name.clone(), shape: *shape }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(json.len() as u32);
    w.bytes(&json);
    for (_, _, data) in &tensors {
        w.f32s(data);
    }
    w.finish()
}

pub fn fingerprint(bytes: &[u8]) -> String {
    codec::hex(codec::checksum(bytes))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let body = codec::verified_body(bytes).ok_or(CheckpointError::Corrupt)?;
    let mut r = Reader::new(&body[8..]);
    let version = r.u32().map_err(|_| CheckpointError::Corrupt)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u32().map_err(|_| CheckpointError::Corrupt)? as usize;
    let raw = r.take(len).map_err(|_| CheckpointError::Corrupt)?;
    let header: Header = serde_json::from_slice(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != version {
        return Err(CheckpointError::Header("format_version disagrees with the file prefix".into()));
    }
    let expected = EncoderParams::<f32>::expected_shapes(&header.config, header.mode);
    let listed: Vec<(String, [usize; 2])> = header.tensors.iter().map(|t| (t.name.clone(), t.shape)).collect();
    if expected != listed {
        return Err(CheckpointError::Shape(format!("expected tensors {expected:?}, header lists {listed:?}")));
    }
    let mut tensors = Vec::with_capacity(listed.len());
    for (_, [rows, cols]) in &listed {
        tensors.push(r.f32s(rows * cols).map_err(|_| CheckpointError::Corrupt)?);
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Corrupt);
    }
    let params = EncoderParams::from_tensors(header.config, header.mode, tensors)
        .map_err(|e| CheckpointError::Shape(e.to_string()))?;
    Ok(Checkpoint { params, epoch: header.epoch, fingerprint: fingerprint(bytes) })
}

/// Writes atomically and returns the fingerprint.
pub fn save(path: &Path, params: &EncoderParams<f32>, epoch: Option<usize>) -> io::Result<String> {
    let bytes = encode(params, epoch);
    write_atomic(path, |w| io::Write::write_all(w, &bytes))?;
    Ok(fingerprint(&bytes))
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&fs::read(path)?)
}
