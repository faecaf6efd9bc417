//! Multi-task training: modality dropout, label assignment, the loss terms
//! and the two-frame optimization step.

pub mod losses;
pub mod matching;
pub mod optim;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment::{self, AlignmentBatch};
use crate::config::Config;
use crate::data::{Modality, VideoSample};
use crate::encoders;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::sigmoid;
use crate::model::{self, ExpressionInput, Model, Network};
use crate::params::Bound;

use self::losses::LossParts;
use self::optim::AdamW;

/// Which expression modalities a forward pass receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    TextOnly,
    AudioOnly,
    Both,
}

impl ModalityMode {
    pub const ALL: [ModalityMode; 3] = [ModalityMode::TextOnly, ModalityMode::AudioOnly, ModalityMode::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityMode::TextOnly => "text_only",
            ModalityMode::AudioOnly => "audio_only",
            ModalityMode::Both => "both",
        }
    }

    /// Keeps the modalities this mode allows.
    pub fn input<'a>(self, text: &'a [u32], audio: &'a [u32]) -> ExpressionInput<'a> {
        ExpressionInput {
            text: (self != ModalityMode::AudioOnly).then_some(text),
            audio: (self != ModalityMode::TextOnly).then_some(audio),
        }
    }
}

/// Equiprobable choice among text-only, audio-only and both.
pub fn modality_dropout(rng: &mut ChaCha8Rng) -> ModalityMode {
    ModalityMode::ALL[rng.gen_range(0..3)]
}

/// Expression modalities used during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Text,
    Audio,
    /// Modality dropout over text, audio and both.
    Mix,
}

impl TrainMode {
    fn draw(self, rng: &mut ChaCha8Rng) -> ModalityMode {
        match self {
            TrainMode::Text => ModalityMode::TextOnly,
            TrainMode::Audio => ModalityMode::AudioOnly,
            TrainMode::Mix => modality_dropout(rng),
        }
    }

    /// Single-modality training never sees the other modality, so the
    /// audio-text alignment term is only used in mix mode.
    pub fn uses_alignment(self) -> bool {
        self == TrainMode::Mix
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(TrainMode::Text),
            "audio" => Ok(TrainMode::Audio),
            "mix" => Ok(TrainMode::Mix),
            _ => Err(Error::Invalid(format!("unknown training mode `{s}` (text|audio|mix)"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Text => "text",
            TrainMode::Audio => "audio",
            TrainMode::Mix => "mix",
        })
    }
}

/// One clip of a training batch: two frames, a referred object and one
/// text/audio expression pair of the same paraphrase class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSample {
    pub video: usize,
    pub frames: [usize; 2],
    pub object: usize,
    pub text_expr: usize,
    pub audio_expr: usize,
    pub mode: ModalityMode,
}

pub fn draw_training_sample(dataset: &[VideoSample], mode: TrainMode, rng: &mut ChaCha8Rng) -> Result<TrainingSample> {
    if dataset.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let video = rng.gen_range(0..dataset.len());
    let s = &dataset[video];
    if s.num_frames() < 2 {
        return Err(Error::Invalid("training needs at least two frames per clip".into()));
    }
    let mut frames: Vec<usize> = (0..s.num_frames()).collect();
    frames.shuffle(rng);
    let object = rng.gen_range(0..s.num_objects());
    let texts: Vec<usize> = (0..s.expressions.len())
        .filter(|&i| s.expressions[i].object_id == object && s.expressions[i].modality == Modality::Text)
        .collect();
    let text_expr = *texts.choose(rng).ok_or(Error::NoExpression)?;
    let sid = s.expressions[text_expr].semantic_id;
    let audios: Vec<usize> = (0..s.expressions.len())
        .filter(|&i| s.expressions[i].semantic_id == sid && s.expressions[i].modality == Modality::Audio)
        .collect();
    let audio_expr = *audios.choose(rng).ok_or(Error::NoExpression)?;
    Ok(TrainingSample {
        video,
        frames: [frames[0], frames[1]],
        object,
        text_expr,
        audio_expr,
        mode: mode.draw(rng),
    })
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(g.constant_matrix(1, 1, vec![0.0]));
    }
    let stacked = g.concat_rows(terms)?;
    Ok(g.mean(stacked))
}

/// Loss graph of one batch plus diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub parts: LossParts,
    pub degenerate_boxes: usize,
}

/// Expression contrastive loss over an alignment batch.
pub fn alignment_loss(g: &mut Graph, net: &Network, dataset: &[VideoSample], batch: &AlignmentBatch, tau: f64) -> Result<Var> {
    let mut audio = Vec::with_capacity(batch.entries.len());
    let mut text = Vec::with_capacity(batch.entries.len());
    for e in &batch.entries {
        let s = &dataset[e.video_id];
        let ft = encoders::encode_text(g, &s.expressions[e.text_expr].tokens, &net.encoders)?;
        let fa = encoders::encode_audio(g, &s.expressions[e.audio_expr].tokens, &net.encoders)?;
        text.push(alignment::project_expression(g, &ft, &net.text_projection)?);
        audio.push(alignment::project_expression(g, &fa, &net.audio_projection)?);
    }
    alignment::expression_contrastive_loss(g, &audio, &text, tau)
}

/// Builds the full objective for `samples` (and optionally an alignment
/// batch) on `g`.
pub fn batch_loss(
    g: &mut Graph,
    net: &Network,
    config: &Config,
    dataset: &[VideoSample],
    samples: &[TrainingSample],
    align: Option<&AlignmentBatch>,
) -> Result<BatchLoss> {
    let tc = &config.train;
    let w = &tc.weights;
    let (h, wd) = (config.data.frame_height, config.data.frame_width);
    let (mut ref_terms, mut box_terms, mut mask_terms, mut emb_terms) = (vec![], vec![], vec![], vec![]);
    let mut degenerate_boxes = 0;
    for s in samples {
        let sample = &dataset[s.video];
        let text = &sample.expressions[s.text_expr].tokens;
        let audio = &sample.expressions[s.audio_expr].tokens;
        let expr = model::encode_expression(g, net, s.mode.input(text, audio))?;
        let mut instances: [Vec<Var>; 2] = [vec![], vec![]];
        for (fi, &f) in s.frames.iter().enumerate() {
            let out = model::forward_frame(g, net, &sample.frames[f], h, wd, &expr)?;
            let probs: Vec<f64> = g.value(out.scores).iter().map(|&x| sigmoid(x)).collect();
            let pred_boxes: Vec<[f64; 4]> = g.value(out.boxes).chunks(4).map(|c| c.try_into().unwrap()).collect();
            let gt_boxes: Vec<[f64; 4]> = sample.gt_boxes.iter().map(|b| b[f]).collect();
            let m = matching::assign_labels(&probs, &pred_boxes, &gt_boxes, s.object, w, tc.focal_alpha, tc.focal_gamma)?;
            let mut targets = vec![0.0; probs.len()];
            targets[m.query_of_object[s.object]] = 1.0;
            ref_terms.push(losses::loss_focal(g, out.scores, &targets, tc.focal_alpha, tc.focal_gamma)?);
            for (o, &q) in m.query_of_object.iter().enumerate() {
                let b = g.slice_rows(out.boxes, q, 1)?;
                let bl = losses::loss_box(g, b, &gt_boxes[o])?;
                degenerate_boxes += bl.degenerate as usize;
                let l1 = g.scale(bl.l1, w.box_l1);
                let gi = g.scale(bl.giou, w.box_giou);
                box_terms.push(g.add(l1, gi)?);
                let logits = model::query_mask(g, net, &out, q)?;
                let ml = losses::loss_mask(g, logits, &sample.gt_masks[o][f], tc.focal_alpha, tc.focal_gamma)?;
                let d = g.scale(ml.dice, w.mask_dice);
                let fo = g.scale(ml.focal, w.mask_focal);
                mask_terms.push(g.add(d, fo)?);
                instances[fi].push(g.slice_rows(out.f_ins, q, 1)?);
            }
        }
        emb_terms.push(losses::loss_emb(g, &instances[0], &instances[1], tc.emb_tau)?);
    }
    let expression = match align {
        Some(batch) => alignment_loss(g, net, dataset, batch, tc.tau)?,
        None => g.constant_matrix(1, 1, vec![0.0]),
    };
    let parts = LossParts {
        referring: mean_of(g, &ref_terms)?,
        boxes: mean_of(g, &box_terms)?,
        mask: mean_of(g, &mask_terms)?,
        embedding: mean_of(g, &emb_terms)?,
        expression,
    };
    let total = losses::total_loss(g, &parts, w)?;
    Ok(BatchLoss {
        total,
        parts,
        degenerate_boxes,
    })
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossValues {
    pub referring: f64,
    pub boxes: f64,
    pub mask: f64,
    pub embedding: f64,
    pub expression: f64,
    pub total: f64,
}

impl LossValues {
    fn read(g: &Graph, b: &BatchLoss) -> Self {
        Self {
            referring: g.scalar(b.parts.referring),
            boxes: g.scalar(b.parts.boxes),
            mask: g.scalar(b.parts.mask),
            embedding: g.scalar(b.parts.embedding),
            expression: g.scalar(b.parts.expression),
            total: g.scalar(b.total),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub modes: Vec<ModalityMode>,
    pub losses: LossValues,
    pub grad_norm: f64,
    pub degenerate_boxes: usize,
}

impl StepRecord {
    /// Single-line JSON.
    pub fn to_log_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }
}

/// Loss values, degenerate box count and per-parameter gradients (store
/// order; `None` for parameters the loss does not reach).
pub type LossAndGradients = (LossValues, usize, Vec<Option<Vec<f64>>>);

pub fn loss_and_gradients(
    model: &Model,
    dataset: &[VideoSample],
    samples: &[TrainingSample],
    align: Option<&AlignmentBatch>,
) -> Result<LossAndGradients> {
    let mut g = Graph::new();
    let b = Bound::trainable(&mut g, &model.params);
    let net = Network::bind(&b, model);
    let loss = batch_loss(&mut g, &net, &model.config, dataset, samples, align)?;
    let values = LossValues::read(&g, &loss);
    if !values.total.is_finite() {
        return Err(Error::NonFinite("total".into()));
    }
    g.backward(loss.total)?;
    let grads = b.iter().map(|(_, v)| g.grad(v).map(<[f64]>::to_vec)).collect();
    Ok((values, loss.degenerate_boxes, grads))
}

/// Loss of a fixed batch without updating anything.
pub fn evaluate_loss(model: &Model, dataset: &[VideoSample], samples: &[TrainingSample], align: Option<&AlignmentBatch>) -> Result<LossValues> {
    let mut g = Graph::new();
    let b = Bound::frozen(&mut g, &model.params);
    let net = Network::bind(&b, model);
    let loss = batch_loss(&mut g, &net, &model.config, dataset, samples, align)?;
    Ok(LossValues::read(&g, &loss))
}

/// Owns the model, optimizer state and sampling stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub mode: TrainMode,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, mode: TrainMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.train.seed);
        // stream 0 is used for parameter initialization
        rng.set_stream(1);
        Self {
            optimizer: AdamW::new(&model.params),
            model,
            mode,
            rng,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Draws a batch and takes one optimization step.
    pub fn step(&mut self, dataset: &[VideoSample]) -> Result<StepRecord> {
        let tc = &self.model.config.train;
        let (batch_size, align_batch, use_align) = (tc.batch_size, tc.align_batch, self.mode.uses_alignment() && tc.weights.lambda_expr > 0.0);
        let samples = (0..batch_size)
            .map(|_| draw_training_sample(dataset, self.mode, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let align = if use_align {
            Some(alignment::build_alignment_batch(dataset, align_batch, &mut self.rng)?)
        } else {
            None
        };
        self.step_on(dataset, &samples, align.as_ref())
    }

    /// One optimization step on a given batch.
    pub fn step_on(&mut self, dataset: &[VideoSample], samples: &[TrainingSample], align: Option<&AlignmentBatch>) -> Result<StepRecord> {
        let (losses, degenerate_boxes, grads) = loss_and_gradients(&self.model, dataset, samples, align)?;
        let mut grads: Vec<Vec<f64>> = grads
            .into_iter()
            .zip(self.model.params.iter())
            .map(|(g, (_, t))| g.unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        let tc = &self.model.config.train;
        let grad_norm = optim::clip_global_norm(&mut grads, tc.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let (lr, wd) = (tc.lr, tc.weight_decay);
        self.optimizer.update(&mut self.model.params, &grads, lr, wd);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            modes: samples.iter().map(|s| s.mode).collect(),
            losses,
            grad_norm,
            degenerate_boxes,
        })
    }
}

/// Trains a fresh model (initialized from `config.train.seed`) for
/// `config.train.steps` steps, reporting every step to `log`.
pub fn train(config: &Config, dataset: &[VideoSample], mode: TrainMode, mut log: impl FnMut(&StepRecord)) -> Result<Model> {
    let model = Model::new(config.clone(), config.train.seed);
    let mut trainer = Trainer::new(model, mode);
    for _ in 0..config.train.steps {
        let rec = trainer.step(dataset)?;
        log(&rec);
    }
    Ok(trainer.model)
}
