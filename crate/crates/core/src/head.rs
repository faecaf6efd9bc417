//! Query decoder, referring score, box head, dynamic-convolution mask head
//! and non-maximum suppression.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::{self, BoxCxCyWh};
use crate::config::ModelConfig;
use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Hidden width of the dynamic convolution stack.
pub const DYN_CHANNELS: usize = 8;
/// Relative coordinates are expressed in units of a quarter frame.
const REL_COORD_SCALE: f64 = 4.0;
/// Initial bias of the last dynamic layer (a low foreground prior).
const MASK_PRIOR_BIAS: f64 = -2.0;

#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_attn: AttnParams,
    pub cross_attn: AttnParams,
    pub ff1: (Var, Var),
    pub ff2: (Var, Var),
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    /// Learnable query table, `Q x C`.
    pub queries: Var,
    pub layers: Vec<DecoderLayer>,
    pub heads: usize,
}

fn attn_names(prefix: &str) -> [String; 4] {
    ["q", "k", "v", "o"].map(|s| format!("{prefix}.{s}"))
}

impl DecoderParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
        store.xavier(rng, "dec.queries", cfg.queries, cfg.dim);
        for i in 0..cfg.decoder_layers {
            for part in ["sa", "ca"] {
                for n in attn_names(&format!("dec.{i}.{part}")) {
                    store.xavier(rng, &n, cfg.dim, cfg.dim);
                }
            }
            nn::init_linear(store, rng, &format!("dec.{i}.ff1"), cfg.dim, cfg.ffn_hidden, Some(0.0));
            nn::init_linear(store, rng, &format!("dec.{i}.ff2"), cfg.ffn_hidden, cfg.dim, Some(0.0));
        }
    }

    pub fn bind(b: &Bound, cfg: &ModelConfig) -> Self {
        let attn = |prefix: String| {
            let [q, k, v, o] = attn_names(&prefix).map(|n| b.var(&n));
            AttnParams { q, k, v, o }
        };
        let lin = |prefix: String| (b.var(&format!("{prefix}.w")), b.var(&format!("{prefix}.b")));
        let layers = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer {
                self_attn: attn(format!("dec.{i}.sa")),
                cross_attn: attn(format!("dec.{i}.ca")),
                ff1: lin(format!("dec.{i}.ff1")),
                ff2: lin(format!("dec.{i}.ff2")),
            })
            .collect();
        Self {
            queries: b.var("dec.queries"),
            layers,
            heads: cfg.heads,
        }
    }
}

fn attention(g: &mut Graph, x: Var, memory: Var, mask: Option<&[bool]>, p: &AttnParams, heads: usize) -> Result<Var> {
    let q = g.matmul(x, p.q)?;
    let k = g.matmul(memory, p.k)?;
    let v = g.matmul(memory, p.v)?;
    let logits = nn::head_logits(g, q, k, heads)?;
    let a = nn::attend(g, &logits, v, mask)?;
    Ok(g.matmul(a, p.o)?)
}

/// `layers` rounds of self-attention, cross-attention over the visual
/// features and a feed-forward block, each with a residual connection.
pub fn decode(g: &mut Graph, f_v: &FeatureMap, queries: Var, p: &DecoderParams) -> Result<Var> {
    let mut x = queries;
    for layer in &p.layers {
        let sa = attention(g, x, x, None, &layer.self_attn, p.heads)?;
        x = g.add(x, sa)?;
        let ca = attention(g, x, f_v.data, Some(&f_v.pad_mask), &layer.cross_attn, p.heads)?;
        x = g.add(x, ca)?;
        let h = g.matmul(x, layer.ff1.0)?;
        let h = g.add_row(h, layer.ff1.1)?;
        let h = g.relu(h);
        let h = g.matmul(h, layer.ff2.0)?;
        let h = g.add_row(h, layer.ff2.1)?;
        x = g.add(x, h)?;
    }
    Ok(x)
}

/// `S_ref = F_ins . mean(F_r')^T` over unpadded rows; `Q x 1`.
pub fn referring_score(g: &mut Graph, f_ins: Var, f_r: &FeatureMap) -> Result<Var> {
    if f_r.is_fully_padded() {
        return Err(Error::EmptyExpression);
    }
    let pooled = g.mean_pool_rows(f_r.data, Some(&f_r.pad_mask))?;
    let pt = g.transpose(pooled);
    Ok(g.matmul(f_ins, pt)?)
}

#[derive(Debug, Clone, Copy)]
pub struct BoxHeadParams {
    pub hidden: (Var, Var),
    pub out: (Var, Var),
}

impl BoxHeadParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
        nn::init_linear(store, rng, "box.0", cfg.dim, cfg.dim, Some(0.0));
        nn::init_linear(store, rng, "box.1", cfg.dim, 4, Some(0.0));
    }

    pub fn bind(b: &Bound) -> Self {
        Self {
            hidden: (b.var("box.0.w"), b.var("box.0.b")),
            out: (b.var("box.1.w"), b.var("box.1.b")),
        }
    }
}

/// Normalized `(cx, cy, w, h)` per query; `Q x 4`.
pub fn box_head(g: &mut Graph, f_ins: Var, p: &BoxHeadParams) -> Result<Var> {
    let h = g.matmul(f_ins, p.hidden.0)?;
    let h = g.add_row(h, p.hidden.1)?;
    let h = g.relu(h);
    let o = g.matmul(h, p.out.0)?;
    let o = g.add_row(o, p.out.1)?;
    Ok(g.sigmoid(o))
}

/// Bilinear interpolation matrix (`out_h*out_w x in_h*in_w`) with
/// half-pixel centres and edge clamping.
pub fn bilinear_matrix(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let axis = |out: usize, inp: usize| -> Vec<[(usize, f64); 2]> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                let t = src - lo as f64;
                [(lo, 1.0 - t), (hi, t)]
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, in_h), axis(out_w, in_w));
    let n_in = in_h * in_w;
    let mut m = vec![0.0; out_h * out_w * n_in];
    for (oy, wy) in ys.iter().enumerate() {
        for (ox, wx) in xs.iter().enumerate() {
            let row = &mut m[(oy * out_w + ox) * n_in..][..n_in];
            for &(iy, a) in wy {
                for &(ix, b) in wx {
                    row[iy * in_w + ix] += a * b;
                }
            }
        }
    }
    m
}

/// Normalized cell-centre coordinates `(x, y)` of an `h x w` grid, row-major.
fn centres(h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            out.push((x as f64 + 0.5) / w as f64);
            out.push((y as f64 + 0.5) / h as f64);
        }
    }
    out
}

/// Sizes of the generated convolution stack for `in_ch` input channels.
pub fn dynamic_param_count(in_ch: usize) -> usize {
    in_ch * DYN_CHANNELS + DYN_CHANNELS + DYN_CHANNELS * DYN_CHANNELS + DYN_CHANNELS + DYN_CHANNELS + 1
}

#[derive(Debug, Clone)]
pub struct MaskHeadParams {
    pub generator: (Var, Var),
    /// `C x mask_channels` projection used in detail mode.
    pub feature_proj: Option<Var>,
    pub detail: bool,
}

impl MaskHeadParams {
    pub fn input_channels(cfg: &ModelConfig) -> usize {
        if cfg.mask_detail {
            cfg.mask_channels + 3 + 2
        } else {
            cfg.dim + 2
        }
    }

    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
        let in_ch = Self::input_channels(cfg);
        let n = dynamic_param_count(in_ch);
        store.xavier_gain(rng, "mask.gen.w", cfg.dim, n, 0.1);
        // Generator bias: a usable random conv stack before any training.
        let mut bias = Vec::with_capacity(n);
        for (fan_in, fan_out) in [(in_ch, DYN_CHANNELS), (DYN_CHANNELS, DYN_CHANNELS), (DYN_CHANNELS, 1)] {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            bias.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)));
            let b0 = if fan_out == 1 { MASK_PRIOR_BIAS } else { 0.0 };
            bias.extend(std::iter::repeat_n(b0, fan_out));
        }
        store.insert("mask.gen.b", Tensor::matrix(1, n, bias).expect("non-empty"));
        if cfg.mask_detail {
            store.xavier(rng, "mask.feat", cfg.dim, cfg.mask_channels);
        }
    }

    pub fn bind(b: &Bound, cfg: &ModelConfig) -> Self {
        Self {
            generator: (b.var("mask.gen.w"), b.var("mask.gen.b")),
            feature_proj: cfg.mask_detail.then(|| b.var("mask.feat")),
            detail: cfg.mask_detail,
        }
    }
}

/// Per-frame inputs shared by every query's mask: everything except the
/// relative coordinates.
#[derive(Debug, Clone)]
pub struct MaskFeatures {
    /// `N x K` features at the resolution the convolution runs on.
    pub features: Var,
    /// `N x 2` normalized coordinates of those positions.
    pub coords: Var,
    /// Upsampling applied to the stack's output (grid mode only).
    pub upsample: Option<Var>,
    pub height: usize,
    pub width: usize,
}

/// Builds the mask-head input for one frame. `frame` is the RGB buffer
/// (used in detail mode).
pub fn mask_features(g: &mut Graph, f_v: &FeatureMap, frame: &[u8], height: usize, width: usize, p: &MaskHeadParams) -> Result<MaskFeatures> {
    let (gh, gw) = f_v
        .spatial_dims
        .ok_or_else(|| Error::Shape("mask head needs a visual map with spatial dims".into()))?;
    let up = bilinear_matrix(gh, gw, height, width);
    let n = height * width;
    if p.detail {
        if frame.len() != n * 3 {
            return Err(Error::Shape(format!("frame buffer has {} bytes, expected {}", frame.len(), n * 3)));
        }
        let proj = p.feature_proj.ok_or_else(|| Error::Shape("detail mask head without projection".into()))?;
        let low = g.matmul(f_v.data, proj)?;
        let u = g.constant_matrix(n, gh * gw, up);
        let feats = g.matmul(u, low)?;
        let rgb = g.constant_matrix(n, 3, frame.iter().map(|&v| v as f64 / 255.0).collect());
        let features = g.concat_cols(&[feats, rgb])?;
        let coords = g.constant_matrix(n, 2, centres(height, width));
        Ok(MaskFeatures {
            features,
            coords,
            upsample: None,
            height,
            width,
        })
    } else {
        let coords = g.constant_matrix(gh * gw, 2, centres(gh, gw));
        let upsample = Some(g.constant_matrix(n, gh * gw, up));
        Ok(MaskFeatures {
            features: f_v.data,
            coords,
            upsample,
            height,
            width,
        })
    }
}

/// Generates a three-layer 1x1 convolution stack from one instance feature
/// (`1 x C`) and applies it to every position. `center` (`1 x 2`) anchors
/// the relative-coordinate channels. Returns `H*W x 1` logits.
pub fn dynamic_mask_head(g: &mut Graph, f_ins_row: Var, center: Var, mf: &MaskFeatures, p: &MaskHeadParams) -> Result<Var> {
    let params = g.matmul(f_ins_row, p.generator.0)?;
    let params = g.add_row(params, p.generator.1)?;
    let neg_c = g.neg(center);
    let rel = g.add_row(mf.coords, neg_c)?;
    let rel = g.scale(rel, REL_COORD_SCALE);
    let x = g.concat_cols(&[mf.features, rel])?;
    let in_ch = g.dims(x).1;
    let expected = dynamic_param_count(in_ch);
    if g.dims(params).1 != expected {
        return Err(Error::Shape(format!(
            "generator emits {} values, stack on {in_ch} channels needs {expected}",
            g.dims(params).1
        )));
    }
    let mut off = 0;
    let mut take = |g: &mut Graph, rows: usize, cols: usize| -> Result<Var> {
        let s = g.slice_cols(params, off, rows * cols)?;
        off += rows * cols;
        Ok(g.reshape(s, rows, cols)?)
    };
    let w1 = take(g, in_ch, DYN_CHANNELS)?;
    let b1 = take(g, 1, DYN_CHANNELS)?;
    let w2 = take(g, DYN_CHANNELS, DYN_CHANNELS)?;
    let b2 = take(g, 1, DYN_CHANNELS)?;
    let w3 = take(g, DYN_CHANNELS, 1)?;
    let b3 = take(g, 1, 1)?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let h = g.matmul(h, w2)?;
    let h = g.add_row(h, b2)?;
    let h = g.relu(h);
    let o = g.matmul(h, w3)?;
    let o = g.add_row(o, b3)?;
    match mf.upsample {
        Some(u) => Ok(g.matmul(u, o)?),
        None => Ok(o),
    }
}

/// One query's output after decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub query_id: usize,
    /// `H*W` row-major logits.
    pub mask_logits: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub bbox: BoxCxCyWh,
    /// Pre-sigmoid referring score.
    pub ref_score: f64,
}

impl Prediction {
    pub fn probability(&self) -> f64 {
        sigmoid(self.ref_score)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Greedy NMS on box IoU, highest `sigmoid(ref_score)` first (ties: lower
/// query id). Candidates below `score_threshold` are discarded up front.
pub fn nms_filter(preds: &[Prediction], iou_threshold: f64, score_threshold: f64) -> Vec<Prediction> {
    let mut order: Vec<&Prediction> = preds.iter().filter(|p| p.probability() >= score_threshold).collect();
    order.sort_by(|a, b| b.probability().total_cmp(&a.probability()).then(a.query_id.cmp(&b.query_id)));
    let mut kept: Vec<Prediction> = Vec::new();
    for p in order {
        if kept.iter().all(|k| boxes::iou(&k.bbox, &p.bbox) < iou_threshold) {
            kept.push(p.clone());
        }
    }
    kept
}
