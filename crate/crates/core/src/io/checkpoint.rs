use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_atomic, IoError, Result};
use crate::net::{Mode, Model, ModelConfig, ParamStore, Tensor};
use crate::train::{EpochLog, TargetNorm, Trained};

const MAGIC: [u8; 4] = *b"WPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    mode: Mode,
    norm: TargetNorm,
    history: Vec<EpochLog>,
    params: Vec<ParamEntry>,
}

/// Magic, u16 version, u32 header length, JSON header, then every parameter
/// as little-endian f32 in header order.
pub fn encode_checkpoint(t: &Trained) -> Vec<u8> {
    let header = Header {
        config: t.model.config.clone(),
        mode: t.mode,
        norm: t.norm.clone(),
        history: t.history.clone(),
        params: t
            .model
            .params
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.to_string(),
                shape: p.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serialises");
    let mut out = Vec::with_capacity(10 + json.len() + 4 * t.model.params.total_len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in t.model.params.iter() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Trained> {
    let short = |expected| IoError::TruncatedPayload {
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 10 {
        return Err(short(10));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(IoError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(IoError::BadVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let json = bytes.get(10..10 + hlen).ok_or_else(|| short(10 + hlen))?;
    let header: Header = serde_json::from_slice(json)?;
    header.config.validate()?;
    let mut at = 10 + hlen;
    let mut store = ParamStore::<f32>::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let end = at + 4 * n;
        let raw = bytes.get(at..end).ok_or_else(|| short(end))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(&e.name, Tensor::new(e.shape.clone(), data)?);
        at = end;
    }
    if at != bytes.len() {
        return Err(IoError::TruncatedPayload {
            expected: at,
            found: bytes.len(),
        });
    }
    // Rebuild the architecture, then copy weights across by name and shape.
    let mut model = Model::<f32>::new(header.config, 0)?;
    if model.params.len() != store.len() {
        return Err(IoError::Parse(format!(
            "checkpoint holds {} parameters, architecture needs {}",
            store.len(),
            model.params.len()
        )));
    }
    model.params.load_from(&store)?;
    Ok(Trained {
        model,
        mode: header.mode,
        norm: header.norm,
        history: header.history,
    })
}

pub fn write_checkpoint(path: &Path, t: &Trained) -> Result<()> {
    write_atomic(path, &encode_checkpoint(t))
}

pub fn read_checkpoint(path: &Path) -> Result<Trained> {
    decode_checkpoint(&read_bytes(path)?)
}
