//! The full referring segmentation model: parameter initialization, the
//! per-frame forward pass and inference-time selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{self, Projection};
use crate::config::{Config, ModelConfig};
use crate::data::Modality;
use crate::encoders::{self, EncoderParams, FeatureMap, Role};
use crate::error::{Error, Result};
use crate::eva::{self, EvaParams};
use crate::graph::{Graph, Var};
use crate::head::{self, BoxHeadParams, DecoderParams, MaskFeatures, MaskHeadParams, Prediction};
use crate::mask::Mask;
use crate::params::{Bound, ParamStore};

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: Config,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: Config, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let m = &config.model;
        EncoderParams::init(&mut params, &mut rng, m);
        Projection::init(&mut params, &mut rng, m, Modality::Text);
        Projection::init(&mut params, &mut rng, m, Modality::Audio);
        EvaParams::init(&mut params, &mut rng, m);
        DecoderParams::init(&mut params, &mut rng, m);
        BoxHeadParams::init(&mut params, &mut rng, m);
        MaskHeadParams::init(&mut params, &mut rng, m);
        Self { config, params }
    }

    pub fn grid(&self) -> (usize, usize) {
        let d = &self.config.data;
        let p = self.config.model.patch;
        (d.frame_height / p, d.frame_width / p)
    }
}

/// All parameter groups bound onto one graph.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub encoders: EncoderParams,
    pub text_projection: Projection,
    pub audio_projection: Projection,
    pub eva: EvaParams,
    pub decoder: DecoderParams,
    pub box_head: BoxHeadParams,
    pub mask_head: MaskHeadParams,
}

impl Network {
    pub fn bind(b: &Bound, model: &Model) -> Self {
        let cfg = model.config.model.clone();
        Self {
            encoders: EncoderParams::bind(b, &cfg, model.grid()),
            text_projection: Projection::bind(b, &cfg, Modality::Text),
            audio_projection: Projection::bind(b, &cfg, Modality::Audio),
            eva: EvaParams::bind(b, &cfg),
            decoder: DecoderParams::bind(b, &cfg),
            box_head: BoxHeadParams::bind(b),
            mask_head: MaskHeadParams::bind(b, &cfg),
            cfg,
        }
    }
}

/// Token sequences of the expression(s) given to the model. `None` marks a
/// missing (or dropped) modality.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExpressionInput<'a> {
    pub text: Option<&'a [u32]>,
    pub audio: Option<&'a [u32]>,
}

/// Encoded expressions, shared by every frame of a clip.
#[derive(Debug, Clone)]
pub struct EncodedExpression {
    pub text: FeatureMap,
    pub audio: FeatureMap,
    pub e_text: Option<Var>,
    pub e_audio: Option<Var>,
}

pub fn encode_expression(g: &mut Graph, net: &Network, input: ExpressionInput) -> Result<EncodedExpression> {
    let (len, dim) = (net.cfg.expr_len, net.cfg.dim);
    let text = match input.text {
        Some(t) => encoders::encode_text(g, t, &net.encoders)?,
        None => FeatureMap::absent(g, Role::Text, len, dim),
    };
    let audio = match input.audio {
        Some(a) => encoders::encode_audio(g, a, &net.encoders)?,
        None => FeatureMap::absent(g, Role::Audio, len, dim),
    };
    encode_from_features(g, net, text, audio)
}

/// Same as [`encode_expression`] but from already encoded feature maps.
pub fn encode_from_features(g: &mut Graph, net: &Network, text: FeatureMap, audio: FeatureMap) -> Result<EncodedExpression> {
    if text.is_fully_padded() && audio.is_fully_padded() {
        return Err(Error::NoExpression);
    }
    let e_text = if text.is_fully_padded() {
        None
    } else {
        Some(alignment::project_expression(g, &text, &net.text_projection)?)
    };
    let e_audio = if audio.is_fully_padded() {
        None
    } else {
        Some(alignment::project_expression(g, &audio, &net.audio_projection)?)
    };
    Ok(EncodedExpression {
        text,
        audio,
        e_text,
        e_audio,
    })
}

/// Per-frame outputs before mask generation.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    /// `Q x C` instance features.
    pub f_ins: Var,
    /// `Q x 1` pre-sigmoid referring scores.
    pub scores: Var,
    /// `Q x 4` normalized boxes.
    pub boxes: Var,
    pub mask_features: MaskFeatures,
}

pub fn forward_frame(g: &mut Graph, net: &Network, frame: &[u8], height: usize, width: usize, expr: &EncodedExpression) -> Result<FrameOutput> {
    let f_v = encoders::encode_visual(g, frame, height, width, &net.encoders)?;
    let out = eva::expression_visual_attention(g, &f_v, &expr.text, &expr.audio, &net.eva)?;
    let queries = alignment::inject_queries(g, net.decoder.queries, expr.e_text, expr.e_audio, net.cfg.expr_query)?;
    let f_ins = head::decode(g, &out.visual, queries, &net.decoder)?;
    let scores = head::referring_score(g, f_ins, &out.referring)?;
    let boxes = head::box_head(g, f_ins, &net.box_head)?;
    let mask_features = head::mask_features(g, &out.visual, frame, height, width, &net.mask_head)?;
    Ok(FrameOutput {
        f_ins,
        scores,
        boxes,
        mask_features,
    })
}

/// `H*W x 1` mask logits of query `q`.
pub fn query_mask(g: &mut Graph, net: &Network, out: &FrameOutput, q: usize) -> Result<Var> {
    let row = g.slice_rows(out.f_ins, q, 1)?;
    let b = g.slice_rows(out.boxes, q, 1)?;
    let center = g.slice_cols(b, 0, 2)?;
    head::dynamic_mask_head(g, row, center, &out.mask_features, &net.mask_head)
}

/// Model output for one frame and one expression.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    /// Every query, in query order.
    pub predictions: Vec<Prediction>,
    /// Survivors of NMS, best first.
    pub kept: Vec<usize>,
    /// Queries whose masks form the output.
    pub selected: Vec<usize>,
    pub mask: Mask,
}

/// Runs the model on one frame without recording gradients.
pub fn predict_frame(model: &Model, frame: &[u8], input: ExpressionInput) -> Result<FramePrediction> {
    let mut g = Graph::new();
    let b = Bound::frozen(&mut g, &model.params);
    let net = Network::bind(&b, model);
    let expr = encode_expression(&mut g, &net, input)?;
    predict_with(&mut g, &net, model, frame, &expr)
}

pub(crate) fn predict_with(g: &mut Graph, net: &Network, model: &Model, frame: &[u8], expr: &EncodedExpression) -> Result<FramePrediction> {
    let (h, w) = (model.config.data.frame_height, model.config.data.frame_width);
    let out = forward_frame(g, net, frame, h, w, expr)?;
    let scores = g.value(out.scores).to_vec();
    let boxes = g.value(out.boxes).to_vec();
    let mut predictions = Vec::with_capacity(scores.len());
    for (q, &s) in scores.iter().enumerate() {
        let m = query_mask(g, net, &out, q)?;
        let logits = g.value(m).to_vec();
        if !s.is_finite() || logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("prediction of query {q}")));
        }
        predictions.push(Prediction {
            query_id: q,
            mask_logits: logits,
            height: h,
            width: w,
            bbox: boxes[q * 4..q * 4 + 4].try_into().unwrap(),
            ref_score: s,
        });
    }
    let inf = &model.config.infer;
    let kept = head::nms_filter(&predictions, inf.nms_iou, 0.0);
    let mut selected: Vec<usize> = kept
        .iter()
        .filter(|p| p.probability() > inf.score_threshold)
        .map(|p| p.query_id)
        .collect();
    if selected.is_empty() {
        selected.push(kept[0].query_id);
    }
    let mut mask = Mask::empty(h, w);
    let logit_threshold = (inf.mask_threshold / (1.0 - inf.mask_threshold)).ln();
    for &q in &selected {
        let m = Mask::from_scores(h, w, &predictions[q].mask_logits, logit_threshold);
        mask = mask.or(&m);
    }
    Ok(FramePrediction {
        kept: kept.iter().map(|p| p.query_id).collect(),
        predictions,
        selected,
        mask,
    })
}
