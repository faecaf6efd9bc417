//! Expression-visual attention: blending of the text and audio expression
//! features, bidirectional expression-visual cross-attention with residuals,
//! audio-text collaboration through a shared attention matrix, and the final
//! referring-feature sum.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoders::{FeatureMap, Role};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{Bound, ParamStore};

const NAMES: [&str; 10] = [
    "eva.v", "eva.e", "eva.v_val", "eva.e_val", "atc.a_q", "atc.a_k", "atc.a_v", "atc.t_q", "atc.t_k", "atc.t_v",
];

/// All matrices are `C x C` and split into `heads` column blocks.
#[derive(Debug, Clone, Copy)]
pub struct EvaParams {
    pub w_v: Var,
    pub w_e: Var,
    pub w_v_val: Var,
    pub w_e_val: Var,
    pub w_a_q: Var,
    pub w_a_k: Var,
    pub w_a_v: Var,
    pub w_t_q: Var,
    pub w_t_k: Var,
    pub w_t_v: Var,
    pub heads: usize,
}

impl EvaParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
        for n in NAMES {
            store.xavier(rng, n, cfg.dim, cfg.dim);
        }
    }

    pub fn bind(b: &Bound, cfg: &ModelConfig) -> Self {
        Self::from_vars(&NAMES.map(|n| b.var(n)), cfg.heads)
    }

    /// `vars` in the order `W_v, W_e, W_v^v, W_e^v, W_a^{q,k,v}, W_t^{q,k,v}`.
    pub fn from_vars(vars: &[Var; 10], heads: usize) -> Self {
        Self {
            w_v: vars[0],
            w_e: vars[1],
            w_v_val: vars[2],
            w_e_val: vars[3],
            w_a_q: vars[4],
            w_a_k: vars[5],
            w_a_v: vars[6],
            w_t_q: vars[7],
            w_t_k: vars[8],
            w_t_v: vars[9],
            heads,
        }
    }
}

fn check_same(g: &Graph, a: &FeatureMap, b: &FeatureMap, what: &str) -> Result<()> {
    if g.dims(a.data) != g.dims(b.data) || a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            g.dims(a.data),
            g.dims(b.data)
        )));
    }
    Ok(())
}

/// `F_e = F_t + F_a`. A missing modality contributes nothing; with one input
/// its data handle is returned as is.
pub fn blend_expressions(g: &mut Graph, text: Option<&FeatureMap>, audio: Option<&FeatureMap>) -> Result<FeatureMap> {
    let (data, pad_mask) = match (text, audio) {
        (None, None) => return Err(Error::NoExpression),
        (Some(f), None) | (None, Some(f)) => (f.data, f.pad_mask.clone()),
        (Some(t), Some(a)) => {
            check_same(g, t, a, "blend")?;
            let mask = t.pad_mask.iter().zip(&a.pad_mask).map(|(&x, &y)| x && y).collect();
            (g.add(t.data, a.data)?, mask)
        }
    };
    Ok(FeatureMap {
        data,
        role: Role::Blended,
        pad_mask,
        spatial_dims: None,
    })
}

/// Bidirectional cross-attention sharing one logit matrix per head:
/// visual rows attend over expression keys and expression rows attend over
/// visual keys. Returns `(F_v + F_e2v, F_e + F_v2e)`.
pub fn evi_cross_attention(g: &mut Graph, f_v: &FeatureMap, f_e: &FeatureMap, p: &EvaParams) -> Result<(FeatureMap, FeatureMap)> {
    let (_, cv) = g.dims(f_v.data);
    let (_, ce) = g.dims(f_e.data);
    if cv != ce || cv % p.heads != 0 {
        return Err(Error::Shape(format!("visual width {cv}, expression width {ce}, {} heads", p.heads)));
    }
    let qv = g.matmul(f_v.data, p.w_v)?;
    let ke = g.matmul(f_e.data, p.w_e)?;
    let vv = g.matmul(f_v.data, p.w_v_val)?;
    let ve = g.matmul(f_e.data, p.w_e_val)?;
    let logits = nn::head_logits(g, qv, ke, p.heads)?;
    let e2v = nn::attend(g, &logits, ve, Some(&f_e.pad_mask))?;
    let logits_t: Vec<Var> = logits.iter().map(|&l| g.transpose(l)).collect();
    let v2e = nn::attend(g, &logits_t, vv, Some(&f_v.pad_mask))?;
    let v2e = nn::zero_padded_rows(g, v2e, &f_e.pad_mask)?;
    let v_out = g.add(f_v.data, e2v)?;
    let e_out = g.add(f_e.data, v2e)?;
    Ok((
        FeatureMap { data: v_out, ..f_v.clone() },
        FeatureMap { data: e_out, ..f_e.clone() },
    ))
}

/// Per-head shared logits `A_e = A_a + A_t` of the audio-text collaboration.
pub fn atc_shared_logits(g: &mut Graph, f_a: &FeatureMap, f_t: &FeatureMap, p: &EvaParams) -> Result<Vec<Var>> {
    check_same(g, f_a, f_t, "audio-text collaboration")?;
    let (_, c) = g.dims(f_a.data);
    if c % p.heads != 0 {
        return Err(Error::Shape(format!("width {c} not divisible by {} heads", p.heads)));
    }
    let qa = g.matmul(f_a.data, p.w_a_q)?;
    let ka = g.matmul(f_a.data, p.w_a_k)?;
    let qt = g.matmul(f_t.data, p.w_t_q)?;
    let kt = g.matmul(f_t.data, p.w_t_k)?;
    let aa = nn::head_logits(g, qa, ka, p.heads)?;
    let at = nn::head_logits(g, qt, kt, p.heads)?;
    Ok(aa.iter().zip(&at).map(|(&x, &y)| g.add(x, y)).collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Audio-text collaboration: per head `A_e = A_a + A_t` with
/// `A_x = (F_x W_x^q)(F_x W_x^k)^T / sqrt(d_k)`; both branches are re-formed
/// with `softmax(A_e)`. Keys padded in both modalities are masked and padded
/// output rows are zero.
pub fn atc_shared_attention(g: &mut Graph, f_a: &FeatureMap, f_t: &FeatureMap, p: &EvaParams) -> Result<(FeatureMap, FeatureMap)> {
    let shared = atc_shared_logits(g, f_a, f_t, p)?;
    let pad: Vec<bool> = f_a.pad_mask.iter().zip(&f_t.pad_mask).map(|(&x, &y)| x && y).collect();
    let va = g.matmul(f_a.data, p.w_a_v)?;
    let vt = g.matmul(f_t.data, p.w_t_v)?;
    let oa = nn::attend(g, &shared, va, Some(&pad))?;
    let ot = nn::attend(g, &shared, vt, Some(&pad))?;
    let oa = nn::zero_padded_rows(g, oa, &pad)?;
    let ot = nn::zero_padded_rows(g, ot, &pad)?;
    let wrap = |data, role| FeatureMap {
        data,
        role,
        pad_mask: pad.clone(),
        spatial_dims: None,
    };
    Ok((wrap(oa, Role::Audio), wrap(ot, Role::Text)))
}

/// `F_r' = F_e' + F_a' + F_t'`, keeping the expression's pad mask.
pub fn fuse_referring(g: &mut Graph, f_e: &FeatureMap, f_a: &FeatureMap, f_t: &FeatureMap) -> Result<FeatureMap> {
    check_same(g, f_e, f_a, "fuse")?;
    check_same(g, f_e, f_t, "fuse")?;
    let s = g.add(f_e.data, f_a.data)?;
    let data = g.add(s, f_t.data)?;
    Ok(FeatureMap {
        data,
        role: Role::Referring,
        pad_mask: f_e.pad_mask.clone(),
        spatial_dims: None,
    })
}

/// Outputs of the whole expression-visual attention block.
#[derive(Debug, Clone)]
pub struct EvaOutput {
    pub visual: FeatureMap,
    pub referring: FeatureMap,
}

/// Runs blend, EVI, ATC and fusion. Missing modalities are passed as
/// [`FeatureMap::absent`] maps.
pub fn expression_visual_attention(g: &mut Graph, f_v: &FeatureMap, f_t: &FeatureMap, f_a: &FeatureMap, p: &EvaParams) -> Result<EvaOutput> {
    let text = (!f_t.is_fully_padded()).then_some(f_t);
    let audio = (!f_a.is_fully_padded()).then_some(f_a);
    let f_e = blend_expressions(g, text, audio)?;
    let (visual, e_prime) = evi_cross_attention(g, f_v, &f_e, p)?;
    let (a_prime, t_prime) = atc_shared_attention(g, f_a, f_t, p)?;
    let referring = fuse_referring(g, &e_prime, &a_prime, &t_prime)?;
    Ok(EvaOutput { visual, referring })
}
