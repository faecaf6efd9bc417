//! Segmentation metrics and the text report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mask::Mask;

/// IoU thresholds reported as Precision@K.
pub const PRECISION_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

fn check_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!("masks {}x{} and {}x{}", a.height, a.width, b.height, b.width)))
    }
}

/// Region similarity `|P ∩ G| / |P ∪ G|`; 1 when both are empty.
pub fn region_similarity(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shape(pred, gt)?;
    let u = pred.union(gt);
    Ok(if u == 0 { 1.0 } else { pred.intersection(gt) as f64 / u as f64 })
}

/// Default boundary tolerance: 0.8% of the image diagonal, at least one pixel.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((0.008 * diag).round() as usize).max(1)
}

/// Foreground pixels with at least one background 8-neighbour; pixels
/// outside the image count as background.
pub fn boundary(m: &Mask) -> Mask {
    let (h, w) = (m.height, m.width);
    let mut out = Mask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            if !m.get(r, c) {
                continue;
            }
            let interior = (-1i64..=1).all(|dr| {
                (-1i64..=1).all(|dc| {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && m.get(rr as usize, cc as usize)
                })
            });
            out.set(r, c, !interior);
        }
    }
    out
}

/// Fraction of `from`'s boundary pixels within Euclidean distance `tol` of
/// some boundary pixel of `to`.
fn matched_fraction(from: &Mask, to: &Mask, tol: usize) -> f64 {
    let (h, w) = (from.height as i64, from.width as i64);
    let t = tol as i64;
    let (mut hit, mut total) = (0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            if !from.get(r as usize, c as usize) {
                continue;
            }
            total += 1;
            let found = (-t..=t).any(|dr| {
                (-t..=t).any(|dc| {
                    let (rr, cc) = (r + dr, c + dc);
                    dr * dr + dc * dc <= t * t && rr >= 0 && cc >= 0 && rr < h && cc < w && to.get(rr as usize, cc as usize)
                })
            });
            hit += found as usize;
        }
    }
    hit as f64 / total as f64
}

/// Boundary F-measure with pixel tolerance `tol`.
pub fn contour_accuracy(pred: &Mask, gt: &Mask, tol: usize) -> Result<f64> {
    check_shape(pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let p = matched_fraction(&bp, &bg, tol);
    let r = matched_fraction(&bg, &bp, tol);
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Fraction of IoUs strictly greater than `k`.
pub fn precision_at_k(ious: &[f64], k: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Invalid("precision@K of an empty list".into()));
    }
    Ok(ious.iter().filter(|&&x| x > k).count() as f64 / ious.len() as f64)
}

/// `(overall, mean)`: summed intersection over summed union, and the mean of
/// per-sample IoU (empty unions count as 1).
pub fn aggregate_iou(intersections: &[usize], unions: &[usize]) -> Result<(f64, f64)> {
    if intersections.len() != unions.len() || unions.is_empty() {
        return Err(Error::Invalid(format!("{} intersections vs {} unions", intersections.len(), unions.len())));
    }
    let (si, su): (usize, usize) = (intersections.iter().sum(), unions.iter().sum());
    let overall = if su == 0 { 1.0 } else { si as f64 / su as f64 };
    let per: f64 = intersections
        .iter()
        .zip(unions)
        .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .sum();
    Ok((overall, per / unions.len() as f64))
}

/// One scored mask prediction on image `image`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub image: usize,
    pub score: f64,
    pub mask: Mask,
}

/// Mask IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Average precision at one IoU threshold with 101-point interpolation.
/// `gts[i]` holds the ground-truth masks of image `i`.
pub fn average_precision(preds: &[ScoredMask], gts: &[Vec<Mask>], threshold: f64) -> Result<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(Error::Invalid("mAP without ground truths".into()));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // stable: equal scores keep input order
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(preds.len());
    for i in order {
        let p = &preds[i];
        let img = gts.get(p.image).ok_or_else(|| Error::Invalid(format!("prediction on unknown image {}", p.image)))?;
        // best unmatched ground truth at or above the threshold; ties go to
        // the lower index
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in img.iter().enumerate() {
            if taken[p.image][j] {
                continue;
            }
            let iou = region_similarity(&p.mask, g)?;
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                taken[p.image][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        sum += curve.iter().filter(|(rec, _)| *rec >= r).map(|&(_, p)| p).fold(0.0, f64::max);
    }
    Ok(sum / 101.0)
}

/// AP averaged over [`map_thresholds`].
pub fn mean_average_precision(preds: &[ScoredMask], gts: &[Vec<Mask>]) -> Result<f64> {
    let ts = map_thresholds();
    let mut s = 0.0;
    for &t in &ts {
        s += average_precision(preds, gts, t)?;
    }
    Ok(s / ts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    /// Aligned with [`PRECISION_THRESHOLDS`].
    pub precision_at: [f64; 5],
    pub overall_iou: f64,
    pub mean_iou: f64,
    pub map: f64,
}

impl MetricsReport {
    /// `metric=value` lines with six decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: f64| writeln!(s, "{k}={v:.6}").unwrap();
        line("J", self.j);
        line("F", self.f);
        line("JF", self.jf);
        for (k, v) in PRECISION_THRESHOLDS.iter().zip(self.precision_at) {
            line(&format!("P@{k:.1}"), v);
        }
        line("overall_iou", self.overall_iou);
        line("mean_iou", self.mean_iou);
        line("mAP", self.map);
        s
    }

    /// Reads a report written by [`MetricsReport::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<f64> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .and_then(|(_, v)| v.trim().parse().ok())
                .ok_or_else(|| Error::Invalid(format!("report lacks `{key}`")))
        };
        let mut precision_at = [0.0; 5];
        for (i, k) in PRECISION_THRESHOLDS.iter().enumerate() {
            precision_at[i] = get(&format!("P@{k:.1}"))?;
        }
        Ok(Self {
            j: get("J")?,
            f: get("F")?,
            jf: get("JF")?,
            precision_at,
            overall_iou: get("overall_iou")?,
            mean_iou: get("mean_iou")?,
            map: get("mAP")?,
        })
    }
}

/// Collects per-frame results and produces a [`MetricsReport`].
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    j: Vec<f64>,
    f: Vec<f64>,
    inter: Vec<usize>,
    union: Vec<usize>,
    scored: Vec<ScoredMask>,
    gts: Vec<Vec<Mask>>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one evaluated frame: the output mask, the scored candidate masks
    /// and the ground truth of the referred object.
    pub fn push(&mut self, pred: &Mask, candidates: Vec<(f64, Mask)>, gt: &Mask) -> Result<()> {
        let tol = default_tolerance(gt.height, gt.width);
        self.j.push(region_similarity(pred, gt)?);
        self.f.push(contour_accuracy(pred, gt, tol)?);
        self.inter.push(pred.intersection(gt));
        self.union.push(pred.union(gt));
        let image = self.gts.len();
        self.scored.extend(candidates.into_iter().map(|(score, mask)| ScoredMask { image, score, mask }));
        self.gts.push(vec![gt.clone()]);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.j.len()
    }

    pub fn is_empty(&self) -> bool {
        self.j.is_empty()
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.is_empty() {
            return Err(Error::Invalid("no evaluated frames".into()));
        }
        let n = self.len() as f64;
        let j = self.j.iter().sum::<f64>() / n;
        let f = self.f.iter().sum::<f64>() / n;
        let mut precision_at = [0.0; 5];
        for (p, &k) in precision_at.iter_mut().zip(&PRECISION_THRESHOLDS) {
            *p = precision_at_k(&self.j, k)?;
        }
        let (overall_iou, mean_iou) = aggregate_iou(&self.inter, &self.union)?;
        Ok(MetricsReport {
            j,
            f,
            jf: (j + f) / 2.0,
            precision_at,
            overall_iou,
            mean_iou,
            map: mean_average_precision(&self.scored, &self.gts)?,
        })
    }
}
