//! Toy visual, text and audio encoders with a shared feature width `C`.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::vocab;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Visual,
    Text,
    Audio,
    Blended,
    Referring,
}

/// `L x C` features on a graph. Rows flagged in `pad_mask` are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Var,
    pub role: Role,
    pub pad_mask: Vec<bool>,
    /// Grid `(H', W')` for visual maps; rows are row-major over the grid.
    pub spatial_dims: Option<(usize, usize)>,
}

impl FeatureMap {
    pub fn len(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_mask.is_empty()
    }

    pub fn is_fully_padded(&self) -> bool {
        self.pad_mask.iter().all(|&p| p)
    }

    /// Zero data with every row padded: the stand-in for a missing modality.
    pub fn absent(g: &mut Graph, role: Role, len: usize, dim: usize) -> Self {
        Self {
            data: g.zeros(len, dim),
            role,
            pad_mask: vec![true; len],
            spatial_dims: None,
        }
    }
}

/// Bound encoder parameters plus the fixed positional tables.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub patch_projection: Var,
    pub text_embedding: Var,
    pub audio_embedding: Var,
    pub visual_pos: Vec<f64>,
    pub expr_pos: Vec<f64>,
    pub audio_pool_stride: usize,
    pub patch: usize,
    pub expr_len: usize,
    pub dim: usize,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
        let p = cfg.patch;
        store.xavier(rng, "enc.patch", p * p * 3, cfg.dim);
        store.xavier_gain(rng, "enc.text_emb", vocab::text_vocab_size(), cfg.dim, 3.0);
        store.xavier_gain(rng, "enc.audio_emb", vocab::audio_vocab_size(), cfg.dim, 3.0);
    }

    /// `grid` is the visual patch grid `(H/P, W/P)`.
    pub fn bind(b: &Bound, cfg: &ModelConfig, grid: (usize, usize)) -> Self {
        let (gh, gw) = grid;
        let (visual_pos, expr_pos) = if cfg.positional {
            (nn::sinusoidal_2d(gh, gw, cfg.dim), nn::sinusoidal(cfg.expr_len, cfg.dim))
        } else {
            (vec![0.0; gh * gw * cfg.dim], vec![0.0; cfg.expr_len * cfg.dim])
        };
        Self {
            patch_projection: b.var("enc.patch"),
            text_embedding: b.var("enc.text_emb"),
            audio_embedding: b.var("enc.audio_emb"),
            visual_pos,
            expr_pos,
            audio_pool_stride: cfg.audio_stride,
            patch: cfg.patch,
            expr_len: cfg.expr_len,
            dim: cfg.dim,
        }
    }
}

/// Flattens non-overlapping `P x P` patches of an RGB frame, scaled to [0, 1].
pub fn patchify(frame: &[u8], height: usize, width: usize, patch: usize) -> Result<(usize, usize, Vec<f64>)> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::Shape(format!(
            "frame {height}x{width} is not divisible by patch size {patch}"
        )));
    }
    if frame.len() != height * width * 3 {
        return Err(Error::Shape(format!(
            "frame buffer has {} bytes, expected {}",
            frame.len(),
            height * width * 3
        )));
    }
    let (gh, gw) = (height / patch, width / patch);
    let mut out = Vec::with_capacity(gh * gw * patch * patch * 3);
    for pr in 0..gh {
        for pc in 0..gw {
            for y in 0..patch {
                for x in 0..patch {
                    let o = ((pr * patch + y) * width + pc * patch + x) * 3;
                    out.extend(frame[o..o + 3].iter().map(|&v| v as f64 / 255.0));
                }
            }
        }
    }
    Ok((gh, gw, out))
}

pub fn encode_visual(g: &mut Graph, frame: &[u8], height: usize, width: usize, p: &EncoderParams) -> Result<FeatureMap> {
    let (gh, gw, patches) = patchify(frame, height, width, p.patch)?;
    let lv = gh * gw;
    if p.visual_pos.len() != lv * p.dim {
        return Err(Error::Shape(format!("positional table does not match a {gh}x{gw} grid")));
    }
    let x = g.constant_matrix(lv, p.patch * p.patch * 3, patches);
    let f = g.matmul(x, p.patch_projection)?;
    let pos = g.constant_matrix(lv, p.dim, p.visual_pos.clone());
    let data = g.add(f, pos)?;
    Ok(FeatureMap {
        data,
        role: Role::Visual,
        pad_mask: vec![false; lv],
        spatial_dims: Some((gh, gw)),
    })
}

/// Adds positions to `rows` unpadded rows and pads with zeros to `expr_len`.
fn finish_expression(g: &mut Graph, rows: Option<Var>, p: &EncoderParams, role: Role) -> Result<FeatureMap> {
    let Some(x) = rows else {
        return Ok(FeatureMap::absent(g, role, p.expr_len, p.dim));
    };
    let n = g.dims(x).0;
    let x = if n > p.expr_len { g.slice_rows(x, 0, p.expr_len)? } else { x };
    let n = n.min(p.expr_len);
    let pos = g.constant_matrix(n, p.dim, p.expr_pos[..n * p.dim].to_vec());
    let x = g.add(x, pos)?;
    let data = if n < p.expr_len {
        let pad = g.zeros(p.expr_len - n, p.dim);
        g.concat_rows(&[x, pad])?
    } else {
        x
    };
    let mut pad_mask = vec![true; p.expr_len];
    pad_mask[..n].iter_mut().for_each(|m| *m = false);
    Ok(FeatureMap {
        data,
        role,
        pad_mask,
        spatial_dims: None,
    })
}

fn check_vocab(tokens: &[u32], size: usize, vocab: &'static str) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|&t| {
            if (t as usize) < size {
                Ok(t as usize)
            } else {
                Err(Error::OutOfVocabulary { vocab, token: t })
            }
        })
        .collect()
}

pub fn encode_text(g: &mut Graph, tokens: &[u32], p: &EncoderParams) -> Result<FeatureMap> {
    let idx = check_vocab(tokens, vocab::text_vocab_size(), "text")?;
    let rows = if idx.is_empty() {
        None
    } else {
        Some(g.gather_rows(p.text_embedding, &idx)?)
    };
    finish_expression(g, rows, p, Role::Text)
}

/// Non-overlapping mean-pooling matrix (`ceil(n / stride) x n`); a short
/// final window averages what remains.
pub fn pooling_matrix(n: usize, stride: usize) -> (usize, Vec<f64>) {
    let m = n.div_ceil(stride);
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let lo = r * stride;
        let hi = (lo + stride).min(n);
        let w = 1.0 / (hi - lo) as f64;
        for c in lo..hi {
            out[r * n + c] = w;
        }
    }
    (m, out)
}

pub fn encode_audio(g: &mut Graph, tokens: &[u32], p: &EncoderParams) -> Result<FeatureMap> {
    let idx = check_vocab(tokens, vocab::audio_vocab_size(), "phoneme")?;
    let rows = if idx.is_empty() {
        None
    } else {
        let e = g.gather_rows(p.audio_embedding, &idx)?;
        let (m, pool) = pooling_matrix(idx.len(), p.audio_pool_stride);
        let pm = g.constant_matrix(m, idx.len(), pool);
        Some(g.matmul(pm, e)?)
    };
    finish_expression(g, rows, p, Role::Audio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(positional: bool, stride: usize) -> (ParamStore, ModelConfig) {
        let cfg = ModelConfig {
            positional,
            audio_stride: stride,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        EncoderParams::init(&mut store, &mut rng, &cfg);
        (store, cfg)
    }

    fn rows(g: &Graph, v: Var, c: usize) -> Vec<Vec<f64>> {
        g.value(v).chunks(c).map(<[f64]>::to_vec).collect()
    }

    #[test]
    fn visual_shapes_and_linearity() {
        let (store, cfg) = setup(false, 3);
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &store);
        let p = EncoderParams::bind(&b, &cfg, (6, 6));
        let zero = vec![0u8; 24 * 24 * 3];
        let f = encode_visual(&mut g, &zero, 24, 24, &p).unwrap();
        assert_eq!(g.dims(f.data), (36, 32));
        assert_eq!(f.spatial_dims, Some((6, 6)));
        assert!(g.value(f.data).iter().all(|&v| v == 0.0));

        let mut other = zero.clone();
        // pixel (5, 9) lives in patch (1, 2) -> row 8
        other[(5 * 24 + 9) * 3] = 200;
        let f2 = encode_visual(&mut g, &other, 24, 24, &p).unwrap();
        let (a, bb) = (rows(&g, f.data, 32), rows(&g, f2.data, 32));
        let differing: Vec<usize> = (0..36).filter(|&i| a[i] != bb[i]).collect();
        assert_eq!(differing, vec![8]);

        assert!(matches!(encode_visual(&mut g, &[0u8; 22 * 24 * 3], 22, 24, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn text_padding_and_equivariance() {
        let (store, cfg) = setup(false, 3);
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &store);
        let p = EncoderParams::bind(&b, &cfg, (6, 6));
        let empty = encode_text(&mut g, &[], &p).unwrap();
        assert!(empty.is_fully_padded());
        assert_eq!(g.dims(empty.data), (16, 32));

        let f = encode_text(&mut g, &[4, 8, 14], &p).unwrap();
        assert_eq!(f.pad_mask.iter().filter(|&&m| !m).count(), 3);
        assert!(f.pad_mask[3..].iter().all(|&m| m));
        let r = rows(&g, f.data, 32);
        assert!(r[3..].iter().all(|row| row.iter().all(|&v| v == 0.0)));

        let f2 = encode_text(&mut g, &[14, 4, 8], &p).unwrap();
        let r2 = rows(&g, f2.data, 32);
        assert_eq!(r2[0], r[2]);
        assert_eq!(r2[1], r[0]);
        assert_eq!(r2[2], r[1]);

        assert!(matches!(
            encode_text(&mut g, &[999], &p),
            Err(Error::OutOfVocabulary { token: 999, .. })
        ));
    }

    #[test]
    fn audio_pooling() {
        let (store, cfg) = setup(false, 1);
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &store);
        let p1 = EncoderParams::bind(&b, &cfg, (6, 6));
        let toks = [3u32, 7, 7, 20, 1, 2, 30, 31];
        let a = encode_audio(&mut g, &toks, &p1).unwrap();
        let emb = g.gather_rows(p1.audio_embedding, &toks.map(|t| t as usize)).unwrap();
        assert_eq!(&g.value(a.data)[..8 * 32], g.value(emb));

        let p2 = EncoderParams {
            audio_pool_stride: 2,
            ..p1.clone()
        };
        let a2 = encode_audio(&mut g, &toks, &p2).unwrap();
        assert_eq!(a2.pad_mask.iter().filter(|&&m| !m).count(), 4);

        let p3 = EncoderParams {
            audio_pool_stride: 3,
            ..p1.clone()
        };
        let a3 = encode_audio(&mut g, &[5; 10], &p3).unwrap();
        let r = rows(&g, a3.data, 32);
        assert_eq!(a3.pad_mask.iter().filter(|&&m| !m).count(), 4);
        assert!(r[..4].iter().all(|row| row.iter().zip(&r[0]).all(|(a, b)| (a - b).abs() < 1e-12)));
        assert!(encode_audio(&mut g, &[vocab::audio_vocab_size() as u32], &p1).is_err());
    }

    #[test]
    fn long_inputs_truncate_to_common_length() {
        let (store, cfg) = setup(true, 3);
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &store);
        let p = EncoderParams::bind(&b, &cfg, (6, 6));
        let f = encode_text(&mut g, &[1; 40], &p).unwrap();
        assert_eq!(g.dims(f.data), (16, 32));
        assert!(f.pad_mask.iter().all(|&m| !m));
    }
}
