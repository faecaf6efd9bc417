//! Minimum-cost assignment of ground-truth objects to queries.

use crate::boxes::{self, BoxCxCyWh};
use crate::config::LossWeights;
use crate::error::{Error, Result};

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`), by the shortest augmenting path form of the Hungarian
/// method. Ties resolve towards lower column indices.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows than columns");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row assigned to column j (1-based, 0 = none)
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Query assigned to each ground-truth object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    pub query_of_object: Vec<usize>,
}

impl Matching {
    pub fn object_of_query(&self, q: usize) -> Option<usize> {
        self.query_of_object.iter().position(|&x| x == q)
    }
}

/// Focal loss of one probability against a binary target.
pub fn focal_value(p: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if target {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Cost of giving object `o` to query `q`: referring focal cost (positive
/// only for the referred object) plus weighted L1 and GIoU box costs.
pub fn matching_cost(
    probs: &[f64],
    pred_boxes: &[BoxCxCyWh],
    gt_boxes: &[BoxCxCyWh],
    referred: usize,
    w: &LossWeights,
    alpha: f64,
    gamma: f64,
) -> Vec<Vec<f64>> {
    gt_boxes
        .iter()
        .enumerate()
        .map(|(o, gt)| {
            probs
                .iter()
                .zip(pred_boxes)
                .map(|(&p, pb)| {
                    let cls = focal_value(p, o == referred, alpha, gamma);
                    let l1: f64 = pb.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum();
                    let giou = 1.0 - boxes::giou(pb, gt);
                    w.lambda_ref * cls + w.lambda_box * (w.box_l1 * l1 + w.box_giou * giou)
                })
                .collect()
        })
        .collect()
}

/// Hungarian assignment of all ground-truth objects to queries.
pub fn assign_labels(
    probs: &[f64],
    pred_boxes: &[BoxCxCyWh],
    gt_boxes: &[BoxCxCyWh],
    referred: usize,
    w: &LossWeights,
    alpha: f64,
    gamma: f64,
) -> Result<Matching> {
    if gt_boxes.len() > probs.len() {
        return Err(Error::TooManyObjects(gt_boxes.len(), probs.len()));
    }
    let cost = matching_cost(probs, pred_boxes, gt_boxes, referred, w, alpha, gamma);
    Ok(Matching {
        query_of_object: hungarian(&cost),
    })
}
