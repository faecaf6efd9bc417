//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! magic    "EPCK"
//! version  u32
//! sha256   [u8; 32]   digest of everything after this field
//! clen     u64        length of the config snapshot
//! config   utf-8      `key = value` lines, see `Config::to_text`
//! count    u32        number of parameter records
//! records  { nlen u32, name, ndim u32, dims u64*, values f64* }
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("bad config snapshot: {0}")]
    Config(#[from] ConfigError),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub params: ParamStore,
}

pub fn encode_checkpoint(config: &Config, params: &ParamStore) -> Vec<u8> {
    let text = config.to_text();
    let mut payload = Vec::new();
    payload.extend_from_slice(&(text.len() as u64).to_le_bytes());
    payload.extend_from_slice(text.as_bytes());
    payload.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        payload.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            payload.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, wide: bool) -> Result<usize, CheckpointError> {
        let v = if wide { self.u64()? } else { self.u32()? as u64 };
        usize::try_from(v).map_err(|_| CheckpointError::Truncated)
    }
}

fn utf8(bytes: &[u8]) -> Result<String, CheckpointError> {
    String::from_utf8(bytes.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

/// Walks the payload structure; run before the checksum so that a short
/// file reports `Truncated` rather than `Checksum`.
fn parse_payload(payload: &[u8]) -> Result<(String, ParamStore), CheckpointError> {
    let mut r = Reader { buf: payload, pos: 0 };
    let clen = r.len(true)?;
    let text = utf8(r.take(clen)?)?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.len(false)?;
        let name = utf8(r.take(nlen)?)?;
        let ndim = r.len(false)?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.len(true)?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(CheckpointError::Truncated)?;
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        if params.get(&name).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate parameter `{name}`")));
        }
        params.insert(name, t);
    }
    if r.pos != payload.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok((text, params))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let parsed = parse_payload(payload);
    if let Err(CheckpointError::Truncated) = parsed {
        return Err(CheckpointError::Truncated);
    }
    if Sha256::digest(payload).as_slice() != &bytes[8..HEADER_LEN] {
        return Err(CheckpointError::Checksum);
    }
    let (text, params) = parsed?;
    let config = Config::parse_str(&text)?;
    Ok(Checkpoint { config, params })
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &Config, params: &ParamStore) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(config, params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}
