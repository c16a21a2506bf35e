//! Single-file checkpoint archive: a JSON header describing the config and
//! every named tensor, followed by raw little-endian f32 data. The header
//! is self-describing, so a checkpoint can be read back without the code
//! that produced it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RBCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    config: serde_json::Value,
    step: u64,
    extra: BTreeMap<String, f64>,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint contents.
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub extra: BTreeMap<String, f64>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f32>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    let mut offset = 0usize;
    for (name, shape, data) in &ckpt.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len(),
        });
        offset += data.len();
    }
    let header = Header {
        version: VERSION,
        kind: ckpt.kind.clone(),
        config: ckpt.config.clone(),
        step: ckpt.step,
        extra: ckpt.extra.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::invalid(format!("unserializable checkpoint header: {e}")))?;

    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    let mut payload = Vec::with_capacity(offset * 4);
    for (_, _, data) in &ckpt.tensors {
        for &v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&payload)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let corrupt = |msg: &str| Error::CorruptCheckpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| corrupt(&format!("unreadable header: {e}")))?;
    let payload = &bytes[16 + header_len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let start = entry.offset * 4;
        let end = start + entry.len * 4;
        if end > payload.len() {
            return Err(corrupt(&format!("tensor {} out of range", entry.name)));
        }
        let numel: usize = entry.shape.iter().product();
        if numel != entry.len {
            return Err(corrupt(&format!("tensor {} shape/len mismatch", entry.name)));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((entry.name.clone(), entry.shape.clone(), data));
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        step: header.step,
        extra: header.extra,
        tensors,
    })
}
