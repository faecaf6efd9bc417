//! Dataset file layout (all integers little-endian):
//!
//! ```text
//! magic    "EPCD"
//! version  u32
//! count    u32
//! sha256   [u8; 32]   digest of everything after this field
//! mlen     u64        manifest length in bytes
//! manifest JSON       per-sample scene specs, expressions, boxes and blob offsets
//! blob     bytes      raw RGB frames, then u32 run lengths of every mask
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ExpressionRecord, SceneSpec, VideoSample};
use crate::mask::Mask;

pub const DATASET_MAGIC: &[u8; 4] = b"EPCD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 32;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated file")]
    Truncated,
    #[error("checksum mismatch")]
    Checksum,
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

impl FormatError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u32 {
        match self {
            FormatError::Io(_) => 10,
            FormatError::BadMagic => 11,
            FormatError::Version { .. } => 12,
            FormatError::Truncated => 13,
            FormatError::Checksum => 14,
            FormatError::Manifest(_) => 15,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Span {
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleEntry {
    scene: SceneSpec,
    frames: Vec<Span>,
    /// Indexed `[object][frame]`; spans of u32 run lengths.
    masks: Vec<Vec<Span>>,
    boxes: Vec<Vec<[f64; 4]>>,
    expressions: Vec<ExpressionRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    samples: Vec<SampleEntry>,
}

fn push_span(blob: &mut Vec<u8>, bytes: &[u8]) -> Span {
    let span = Span {
        offset: blob.len() as u64,
        len: bytes.len() as u64,
    };
    blob.extend_from_slice(bytes);
    span
}

/// Serialises a dataset to bytes.
pub fn encode_dataset(dataset: &[VideoSample]) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut samples = Vec::with_capacity(dataset.len());
    for s in dataset {
        let frames = s.frames.iter().map(|f| push_span(&mut blob, f)).collect();
        let masks = s
            .gt_masks
            .iter()
            .map(|per_obj| {
                per_obj
                    .iter()
                    .map(|m| {
                        let bytes: Vec<u8> = m.to_rle().iter().flat_map(|r| r.to_le_bytes()).collect();
                        push_span(&mut blob, &bytes)
                    })
                    .collect()
            })
            .collect();
        samples.push(SampleEntry {
            scene: s.scene.clone(),
            frames,
            masks,
            boxes: s.gt_boxes.clone(),
            expressions: s.expressions.clone(),
        });
    }
    let manifest = Manifest {
        format: "epcd".into(),
        version: DATASET_VERSION,
        samples,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut payload = Vec::with_capacity(8 + json.len() + blob.len());
    payload.extend_from_slice(&(json.len() as u64).to_le_bytes());
    payload.extend_from_slice(&json);
    payload.extend_from_slice(&blob);

    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    out
}

fn slice<'a>(blob: &'a [u8], span: &Span) -> Result<&'a [u8], FormatError> {
    let start = usize::try_from(span.offset).map_err(|_| FormatError::Truncated)?;
    let end = start
        .checked_add(usize::try_from(span.len).map_err(|_| FormatError::Truncated)?)
        .ok_or(FormatError::Truncated)?;
    blob.get(start..end).ok_or(FormatError::Truncated)
}

/// Parses bytes produced by [`encode_dataset`].
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<VideoSample>, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated);
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(FormatError::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let digest = &bytes[12..HEADER_LEN];
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < 8 {
        return Err(FormatError::Truncated);
    }
    let mlen = u64::from_le_bytes(payload[..8].try_into().unwrap());
    let mlen = usize::try_from(mlen).map_err(|_| FormatError::Truncated)?;
    if payload.len() - 8 < mlen {
        return Err(FormatError::Truncated);
    }
    let parsed: Result<Manifest, _> = serde_json::from_slice(&payload[8..8 + mlen]);
    let blob = &payload[8 + mlen..];
    if let Ok(m) = &parsed {
        let needed = m
            .samples
            .iter()
            .flat_map(|s| s.frames.iter().chain(s.masks.iter().flatten()))
            .map(|sp| sp.offset.saturating_add(sp.len))
            .max()
            .unwrap_or(0);
        if needed > blob.len() as u64 {
            return Err(FormatError::Truncated);
        }
    }
    if Sha256::digest(payload).as_slice() != digest {
        return Err(FormatError::Checksum);
    }
    let manifest = parsed.map_err(|e| FormatError::Manifest(e.to_string()))?;
    if manifest.samples.len() != count {
        return Err(FormatError::Manifest(format!(
            "header says {count} samples, manifest has {}",
            manifest.samples.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for entry in manifest.samples {
        let (h, w) = (entry.scene.frame_height, entry.scene.frame_width);
        let frames = entry
            .frames
            .iter()
            .map(|sp| {
                let f = slice(blob, sp)?;
                if f.len() != h * w * 3 {
                    return Err(FormatError::Manifest("frame size mismatch".into()));
                }
                Ok(f.to_vec())
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut gt_masks = Vec::with_capacity(entry.masks.len());
        for per_obj in &entry.masks {
            let mut ms = Vec::with_capacity(per_obj.len());
            for sp in per_obj {
                let raw = slice(blob, sp)?;
                if raw.len() % 4 != 0 {
                    return Err(FormatError::Manifest("mask run table misaligned".into()));
                }
                let runs: Vec<u32> = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
                ms.push(Mask::from_rle(h, w, &runs).ok_or_else(|| FormatError::Manifest("mask runs do not cover frame".into()))?);
            }
            gt_masks.push(ms);
        }
        out.push(VideoSample {
            scene: entry.scene,
            frames,
            gt_masks,
            gt_boxes: entry.boxes,
            expressions: entry.expressions,
        });
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &[VideoSample]) -> Result<(), FormatError> {
    fs::write(path, encode_dataset(dataset))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<VideoSample>, FormatError> {
    decode_dataset(&fs::read(path)?)
}
