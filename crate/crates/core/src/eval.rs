//! Held-out evaluation: segmentation metrics per inference modality and
//! audio-to-text retrieval of the alignment projections.

use rand_chacha::ChaCha8Rng;

use crate::alignment;
use crate::data::{Modality, VideoSample};
use crate::encoders;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mask::Mask;
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{self, ExpressionInput, Model, Network};
use crate::params::Bound;
use crate::training::ModalityMode;

/// `(train, holdout)`: the last `holdout` clips are held out.
pub fn split(dataset: &[VideoSample], holdout: usize) -> Result<(&[VideoSample], &[VideoSample])> {
    if holdout >= dataset.len() {
        return Err(Error::Invalid(format!("holdout {holdout} leaves no training clips out of {}", dataset.len())));
    }
    Ok(dataset.split_at(dataset.len() - holdout))
}

/// The evaluation expression of an object: the first paraphrase class,
/// its text form and its first audio rendition.
pub fn evaluation_input(sample: &VideoSample, object: usize, mode: ModalityMode) -> Result<ExpressionInput<'_>> {
    let text = sample.expressions_of(object, Modality::Text).min_by_key(|e| e.variant_id).ok_or(Error::NoExpression)?;
    let audio = sample
        .expressions
        .iter()
        .filter(|e| e.modality == Modality::Audio && e.semantic_id == text.semantic_id)
        .min_by_key(|e| e.variant_id)
        .ok_or(Error::NoExpression)?;
    Ok(mode.input(&text.tokens, &audio.tokens))
}

/// Output mask of `model` for every frame of `sample` referring to `object`.
pub fn segment_clip(model: &Model, sample: &VideoSample, input: ExpressionInput) -> Result<Vec<model::FramePrediction>> {
    let mut g = Graph::new();
    let b = Bound::frozen(&mut g, &model.params);
    let net = Network::bind(&b, model);
    let expr = model::encode_expression(&mut g, &net, input)?;
    sample.frames.iter().map(|f| model::predict_with(&mut g, &net, model, f, &expr)).collect()
}

/// Evaluates every object of every clip in `samples`, all frames, with
/// the given inference modality.
pub fn evaluate(model: &Model, samples: &[VideoSample], mode: ModalityMode) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    let t = model.config.infer.mask_threshold;
    let logit_threshold = (t / (1.0 - t)).ln();
    for s in samples {
        for o in 0..s.num_objects() {
            let preds = segment_clip(model, s, evaluation_input(s, o, mode)?)?;
            for (f, p) in preds.iter().enumerate() {
                let candidates = p
                    .kept
                    .iter()
                    .map(|&q| {
                        let pr = &p.predictions[q];
                        (pr.probability(), Mask::from_scores(pr.height, pr.width, &pr.mask_logits, logit_threshold))
                    })
                    .collect();
                acc.push(&p.mask, candidates, &s.gt_masks[o][f])?;
            }
        }
    }
    acc.finish()
}

/// Top-1 audio-to-text retrieval accuracy of the alignment projections over
/// `batches` alignment batches of `batch_size` drawn from `samples`.
pub fn retrieval_accuracy(model: &Model, samples: &[VideoSample], batch_size: usize, batches: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for _ in 0..batches {
        let batch = alignment::build_alignment_batch(samples, batch_size, rng)?;
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &model.params);
        let net = Network::bind(&b, model);
        let mut audio = Vec::new();
        let mut text = Vec::new();
        for e in &batch.entries {
            let s = &samples[e.video_id];
            let fa = encoders::encode_audio(&mut g, &s.expressions[e.audio_expr].tokens, &net.encoders)?;
            let ft = encoders::encode_text(&mut g, &s.expressions[e.text_expr].tokens, &net.encoders)?;
            let ea = alignment::project_expression(&mut g, &fa, &net.audio_projection)?;
            let et = alignment::project_expression(&mut g, &ft, &net.text_projection)?;
            audio.push(normalized(g.value(ea)));
            text.push(normalized(g.value(et)));
        }
        for (i, a) in audio.iter().enumerate() {
            let sims: Vec<f64> = text.iter().map(|t| a.iter().zip(t).map(|(x, y)| x * y).sum()).collect();
            // ties resolve to the lowest index
            let best = (0..sims.len()).fold(0, |b, j| if sims[j] > sims[b] { j } else { b });
            hits += (best == i) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Invalid("retrieval over zero batches".into()));
    }
    Ok(hits as f64 / total as f64)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}
