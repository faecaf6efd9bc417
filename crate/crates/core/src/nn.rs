//! Small building blocks shared by the encoders, fusion and decoder.

use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Result;

/// `x W + b` with parameters `{prefix}.w` and optional `{prefix}.b`.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.var(&format!("{prefix}.w")))?;
    match p.try_var(&format!("{prefix}.b")) {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

pub fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize, bias: Option<f64>) {
    store.xavier(rng, &format!("{prefix}.w"), fan_in, fan_out);
    if let Some(b) = bias {
        store.constant(&format!("{prefix}.b"), 1, fan_out, b);
    }
}

/// Splits `x` into `heads` column blocks.
pub fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Vec<Var>> {
    let (_, c) = g.dims(x);
    let dk = c / heads;
    (0..heads).map(|h| g.slice_cols(x, h * dk, dk)).collect()
}

/// Per-head scaled logits `Q_h K_h^T / sqrt(d_k)` for already projected
/// queries and keys.
pub fn head_logits(g: &mut Graph, q: Var, k: Var, heads: usize) -> Result<Vec<Var>> {
    let (_, c) = g.dims(q);
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let qs = split_heads(g, q, heads)?;
    let ks = split_heads(g, k, heads)?;
    qs.into_iter()
        .zip(ks)
        .map(|(qh, kh)| {
            let kt = g.transpose(kh);
            let l = g.matmul(qh, kt)?;
            Ok(g.scale(l, scale))
        })
        .collect()
}

/// Softmax over keys of each head's logits, applied to that head's slice of
/// the projected values; heads are concatenated back to full width.
pub fn attend(g: &mut Graph, logits: &[Var], v: Var, key_mask: Option<&[bool]>) -> Result<Var> {
    let vs = split_heads(g, v, logits.len())?;
    let mut outs = Vec::with_capacity(logits.len());
    for (&l, vh) in logits.iter().zip(vs) {
        let a = g.softmax_rows(l, key_mask)?;
        outs.push(g.matmul(a, vh)?);
    }
    g.concat_cols(&outs)
}

/// Zeroes the rows flagged `true` in `pad_mask`.
pub fn zero_padded_rows(g: &mut Graph, x: Var, pad_mask: &[bool]) -> Result<Var> {
    if !pad_mask.iter().any(|&p| p) {
        return Ok(x);
    }
    let keep: Vec<f64> = pad_mask.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
    let col = g.constant_matrix(pad_mask.len(), 1, keep);
    g.mul_col(x, col)
}

/// Sinusoidal table `len x dim`.
pub fn sinusoidal(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * freq;
            out[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

/// 2-D sinusoidal table for an `h x w` grid: the first half of the channels
/// encode the row, the second half the column.
pub fn sinusoidal_2d(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let rows = sinusoidal(h, half);
    let cols = sinusoidal(w, dim - half);
    let mut out = vec![0.0; h * w * dim];
    for r in 0..h {
        for c in 0..w {
            let o = (r * w + c) * dim;
            out[o..o + half].copy_from_slice(&rows[r * half..(r + 1) * half]);
            out[o + half..o + dim].copy_from_slice(&cols[c * (dim - half)..(c + 1) * (dim - half)]);
        }
    }
    out
}
