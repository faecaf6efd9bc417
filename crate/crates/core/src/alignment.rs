//! Expression alignment: projection of pooled text/audio features into a
//! shared embedding space, the symmetric expression contrastive loss, batch
//! construction with same-object hard negatives, and expression-as-query
//! injection.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{Modality, VideoSample};
use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{Bound, ParamStore};

/// Initial bias of every projection layer; keeps step-0 embeddings off the origin.
pub const PROJECTION_BIAS_INIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentConfig {
    pub temperature: f64,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    pub loss_weight: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            mlp_hidden: 32,
            mlp_layers: 2,
            loss_weight: 1.0,
        }
    }
}

/// Projection MLP of one modality: `Linear (-> ReLU -> Linear)*`.
#[derive(Debug, Clone)]
pub struct Projection {
    layers: Vec<(Var, Var)>,
}

fn prefix(modality: Modality) -> &'static str {
    match modality {
        Modality::Text => "align.text",
        Modality::Audio => "align.audio",
    }
}

impl Projection {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig, modality: Modality) {
        let n = cfg.mlp_layers.max(1);
        for i in 0..n {
            let fan_in = if i == 0 { cfg.dim } else { cfg.mlp_hidden };
            let fan_out = if i + 1 == n { cfg.dim } else { cfg.mlp_hidden };
            nn::init_linear(store, rng, &format!("{}.{i}", prefix(modality)), fan_in, fan_out, Some(PROJECTION_BIAS_INIT));
        }
    }

    pub fn bind(b: &Bound, cfg: &ModelConfig, modality: Modality) -> Self {
        let layers = (0..cfg.mlp_layers.max(1))
            .map(|i| {
                let p = format!("{}.{i}", prefix(modality));
                (b.var(&format!("{p}.w")), b.var(&format!("{p}.b")))
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<(Var, Var)>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            let y = g.matmul(h, w)?;
            h = g.add_row(y, b)?;
        }
        Ok(h)
    }
}

/// Mean-pools the unpadded rows of `f` and applies the modality projection.
pub fn project_expression(g: &mut Graph, f: &FeatureMap, proj: &Projection) -> Result<Var> {
    if f.is_fully_padded() {
        return Err(Error::EmptyExpression);
    }
    let pooled = g.mean_pool_rows(f.data, Some(&f.pad_mask))?;
    proj.forward(g, pooled)
}

/// Symmetric InfoNCE over cosine similarities, averaged over the `2N` terms.
/// Row `i` of `audio` is the positive of row `i` of `text`.
pub fn expression_contrastive_loss(g: &mut Graph, audio: &[Var], text: &[Var], tau: f64) -> Result<Var> {
    if audio.is_empty() || audio.len() != text.len() {
        return Err(Error::Shape(format!(
            "contrastive batch needs N >= 1 paired entries, got {} audio / {} text",
            audio.len(),
            text.len()
        )));
    }
    let a = g.concat_rows(audio)?;
    let t = g.concat_rows(text)?;
    symmetric_info_nce(g, a, t, tau)
}

/// InfoNCE in both directions between the rows of `a` and `b` (`N x C`
/// each, row `i` positive with row `i`), using cosine similarity over `tau`.
pub fn symmetric_info_nce(g: &mut Graph, a: Var, b: Var, tau: f64) -> Result<Var> {
    let n = g.dims(a).0;
    if g.dims(b) != g.dims(a) {
        return Err(Error::Shape(format!("info-nce inputs {:?} vs {:?}", g.dims(a), g.dims(b))));
    }
    let a = g.l2_normalize_rows(a)?;
    let b = g.l2_normalize_rows(b)?;
    let bt = g.transpose(b);
    let sim = g.matmul(a, bt)?;
    let logits = g.scale(sim, 1.0 / tau);
    let logits_t = g.transpose(logits);
    let la = g.log_softmax_rows(logits);
    let lb = g.log_softmax_rows(logits_t);
    let eye = g.constant(crate::tensor::Tensor::identity(n));
    let both = g.add(la, lb)?;
    let diag = g.mul(both, eye)?;
    let s = g.sum(diag);
    Ok(g.scale(s, -1.0 / (2.0 * n as f64)))
}

/// One paired entry: text and audio expressions of the same paraphrase class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentEntry {
    pub video_id: usize,
    pub object_id: usize,
    pub semantic_id: usize,
    /// Index into the sample's `expressions`.
    pub text_expr: usize,
    pub audio_expr: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentBatch {
    pub entries: Vec<AlignmentEntry>,
}

fn attribute_key(sample: &VideoSample, object: usize) -> (crate::data::Shape, crate::data::Color, crate::data::Motion) {
    let o = &sample.scene.objects[object];
    (o.shape, o.color, o.motion)
}

/// Samples `batch_size / 2` objects from distinct scenes; each contributes
/// two entries with distinct paraphrase classes, so every entry has a
/// same-object negative. Objects with identical attribute tuples are kept
/// out of the same batch.
pub fn build_alignment_batch(dataset: &[VideoSample], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<AlignmentBatch> {
    if batch_size == 0 || !batch_size.is_multiple_of(2) {
        return Err(Error::Invalid(format!("alignment batch size must be even and positive, got {batch_size}")));
    }
    if dataset.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let groups = batch_size / 2;
    let mut entries = Vec::with_capacity(batch_size);
    let mut used_scenes = BTreeSet::new();
    let mut used_attrs = BTreeSet::new();
    let max_tries = 50 * groups + 100;
    let mut tries = 0;
    while entries.len() < batch_size {
        tries += 1;
        if tries > max_tries {
            return Err(Error::Invalid(format!(
                "could not assemble {groups} object pairs with two paraphrase classes each"
            )));
        }
        let vid = rng.gen_range(0..dataset.len());
        let s = &dataset[vid];
        if s.num_objects() == 0 {
            continue;
        }
        let oid = rng.gen_range(0..s.num_objects());
        // Distinct scenes as long as the dataset has enough of them.
        if used_scenes.contains(&vid) && used_scenes.len() < dataset.len() {
            continue;
        }
        let key = attribute_key(s, oid);
        if used_attrs.contains(&key) && tries < max_tries / 2 {
            continue;
        }
        let mut classes: Vec<usize> = s
            .expressions_of(oid, Modality::Text)
            .map(|e| e.semantic_id)
            .filter(|&sid| s.counterpart(sid, Modality::Audio).is_some())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if classes.len() < 2 {
            continue;
        }
        classes.shuffle(rng);
        for &sid in &classes[..2] {
            let texts: Vec<usize> = (0..s.expressions.len())
                .filter(|&i| s.expressions[i].semantic_id == sid && s.expressions[i].modality == Modality::Text)
                .collect();
            let audios: Vec<usize> = (0..s.expressions.len())
                .filter(|&i| s.expressions[i].semantic_id == sid && s.expressions[i].modality == Modality::Audio)
                .collect();
            entries.push(AlignmentEntry {
                video_id: vid,
                object_id: oid,
                semantic_id: sid,
                text_expr: *texts.choose(rng).expect("class has a text"),
                audio_expr: *audios.choose(rng).expect("class has an audio"),
            });
        }
        used_scenes.insert(vid);
        used_attrs.insert(key);
    }
    Ok(AlignmentBatch { entries })
}

/// Expression-as-query: adds the mean of the available expression
/// embeddings to every query row. A no-op when disabled or when both are
/// absent.
pub fn inject_queries(g: &mut Graph, queries: Var, e_text: Option<Var>, e_audio: Option<Var>, enabled: bool) -> Result<Var> {
    if !enabled {
        return Ok(queries);
    }
    let e = match (e_text, e_audio) {
        (None, None) => return Ok(queries),
        (Some(t), None) => t,
        (None, Some(a)) => a,
        (Some(t), Some(a)) => {
            let s = g.add(t, a)?;
            g.scale(s, 0.5)
        }
    };
    Ok(g.add_row(queries, e)?)
}
