//! Loss terms on the tape.

use crate::alignment;
use crate::boxes::{BoxCxCyWh, MIN_AREA};
use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::Mask;

/// Mean focal binary cross-entropy of `logits` against `targets` in {0, 1}.
pub fn loss_focal(g: &mut Graph, logits: Var, targets: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
    let (r, c) = g.dims(logits);
    if targets.len() != r * c {
        return Err(Error::Shape(format!("{} targets for {r}x{c} logits", targets.len())));
    }
    let t = g.constant_matrix(r, c, targets.to_vec());
    let not_t = g.constant_matrix(r, c, targets.iter().map(|v| 1.0 - v).collect());
    let alpha_t = g.constant_matrix(r, c, targets.iter().map(|v| v * alpha + (1.0 - v) * (1.0 - alpha)).collect());
    let log_p = g.log_sigmoid(logits);
    let neg = g.neg(logits);
    let log_not_p = g.log_sigmoid(neg);
    let a = g.mul(t, log_p)?;
    let b = g.mul(not_t, log_not_p)?;
    let ll = g.add(a, b)?;
    let ce = g.neg(ll);
    let weighted = g.mul(alpha_t, ce)?;
    let per = if gamma == 0.0 {
        weighted
    } else {
        // 1 - p_t = t (1 - p) + (1 - t) p = sigmoid(-x) for positives, sigmoid(x) otherwise
        let p = g.sigmoid(logits);
        let q = g.sigmoid(neg);
        let tq = g.mul(t, q)?;
        let np = g.mul(not_t, p)?;
        let one_minus_pt = g.add(tq, np)?;
        let modulator = g.powf(one_minus_pt, gamma);
        g.mul(modulator, weighted)?
    };
    Ok(g.mean(per))
}

/// L1 distance over the four coordinates and `1 - GIoU`.
#[derive(Debug, Clone, Copy)]
pub struct BoxLoss {
    pub l1: Var,
    pub giou: Var,
    /// The predicted box had (near) zero area; GIoU used clamped areas.
    pub degenerate: bool,
}

pub fn loss_box(g: &mut Graph, pred: Var, gt: &BoxCxCyWh) -> Result<BoxLoss> {
    if g.dims(pred) != (1, 4) {
        return Err(Error::Shape(format!("box prediction must be 1x4, got {:?}", g.dims(pred))));
    }
    let target = g.constant_matrix(1, 4, gt.to_vec());
    let d = g.sub(pred, target)?;
    let d = g.abs(d);
    let l1 = g.sum(d);

    let pv = g.value(pred).to_vec();
    let degenerate = pv[2] * pv[3] < MIN_AREA;
    let coord = |g: &mut Graph, i: usize| g.slice_cols(pred, i, 1);
    let (cx, cy, w, h) = (coord(g, 0)?, coord(g, 1)?, coord(g, 2)?, coord(g, 3)?);
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let px0 = g.sub(cx, hw)?;
    let px1 = g.add(cx, hw)?;
    let py0 = g.sub(cy, hh)?;
    let py1 = g.add(cy, hh)?;
    let c = |g: &mut Graph, v: f64| g.constant_matrix(1, 1, vec![v]);
    let (gx0, gx1) = (c(g, gt[0] - gt[2] / 2.0), c(g, gt[0] + gt[2] / 2.0));
    let (gy0, gy1) = (c(g, gt[1] - gt[3] / 2.0), c(g, gt[1] + gt[3] / 2.0));

    let ix1 = g.minimum(px1, gx1)?;
    let ix0 = g.maximum(px0, gx0)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let iy1 = g.minimum(py1, gy1)?;
    let iy0 = g.maximum(py0, gy0)?;
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let area_p = g.mul(w, h)?;
    let area_g = gt[2].max(0.0) * gt[3].max(0.0);
    let union = g.sub(area_p, inter)?;
    let union = g.add_scalar(union, area_g);
    let floor = c(g, MIN_AREA);
    let union = g.maximum(union, floor)?;
    let ex1 = g.maximum(px1, gx1)?;
    let ex0 = g.minimum(px0, gx0)?;
    let ey1 = g.maximum(py1, gy1)?;
    let ey0 = g.minimum(py0, gy0)?;
    let ew = g.sub(ex1, ex0)?;
    let eh = g.sub(ey1, ey0)?;
    let enclose = g.mul(ew, eh)?;
    let enclose = g.maximum(enclose, floor)?;
    let iou = g.div(inter, union)?;
    let gap = g.sub(enclose, union)?;
    let penalty = g.div(gap, enclose)?;
    let giou = g.sub(iou, penalty)?;
    let giou_loss = g.neg(giou);
    let giou_loss = g.add_scalar(giou_loss, 1.0);
    Ok(BoxLoss {
        l1,
        giou: giou_loss,
        degenerate,
    })
}

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy)]
pub struct MaskLoss {
    pub focal: Var,
    pub dice: Var,
}

/// Pixelwise focal loss and smoothed dice loss of `H*W x 1` logits.
pub fn loss_mask(g: &mut Graph, logits: Var, gt: &Mask, alpha: f64, gamma: f64) -> Result<MaskLoss> {
    let n = gt.height * gt.width;
    if g.dims(logits).0 * g.dims(logits).1 != n {
        return Err(Error::Shape(format!("mask logits {:?} vs {}x{} target", g.dims(logits), gt.height, gt.width)));
    }
    let targets: Vec<f64> = gt.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let focal = loss_focal(g, logits, &targets, alpha, gamma)?;
    let (r, c) = g.dims(logits);
    let t = g.constant_matrix(r, c, targets.clone());
    let p = g.sigmoid(logits);
    let pt = g.mul(p, t)?;
    let inter = g.sum(pt);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let sp = g.sum(p);
    let den = g.add_scalar(sp, gt.area() as f64 + DICE_EPS);
    let ratio = g.div(num, den)?;
    let dice = g.neg(ratio);
    let dice = g.add_scalar(dice, 1.0);
    Ok(MaskLoss { focal, dice })
}

/// Cross-frame InfoNCE between matched instance embeddings: row `k` of
/// `frame1` and row `k` of `frame2` belong to the same object. Zero with
/// fewer than two instances.
pub fn loss_emb(g: &mut Graph, frame1: &[Var], frame2: &[Var], tau: f64) -> Result<Var> {
    if frame1.len() != frame2.len() {
        return Err(Error::Shape(format!("{} vs {} matched instances", frame1.len(), frame2.len())));
    }
    if frame1.len() <= 1 {
        return Ok(g.constant_matrix(1, 1, vec![0.0]));
    }
    let a = g.concat_rows(frame1)?;
    let b = g.concat_rows(frame2)?;
    alignment::symmetric_info_nce(g, a, b, tau)
}

/// The five weighted terms.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub referring: Var,
    pub boxes: Var,
    pub mask: Var,
    pub embedding: Var,
    pub expression: Var,
}

/// `lambda_ref l_ref + lambda_box l_box + lambda_mask l_mask + lambda_emb l_emb + lambda_expr l_expr`.
pub fn total_loss(g: &mut Graph, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let terms = [
        ("ref", parts.referring, w.lambda_ref),
        ("box", parts.boxes, w.lambda_box),
        ("mask", parts.mask, w.lambda_mask),
        ("emb", parts.embedding, w.lambda_emb),
        ("expr", parts.expression, w.lambda_expr),
    ];
    let mut total: Option<Var> = None;
    for (name, v, lambda) in terms {
        if !g.scalar(v).is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let s = g.scale(v, lambda);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(total.expect("five terms"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes;
    use crate::gradcheck::check_gradients;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn focal_oracle(x: &[f64], t: &[f64], alpha: f64, gamma: f64) -> f64 {
        let s: f64 = x
            .iter()
            .zip(t)
            .map(|(&x, &t)| {
                let p = 1.0 / (1.0 + (-x).exp());
                if t == 1.0 {
                    -alpha * (1.0 - p).powf(gamma) * p.ln()
                } else {
                    -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
                }
            })
            .sum();
        s / x.len() as f64
    }

    fn focal(x: &[f64], t: &[f64], alpha: f64, gamma: f64) -> f64 {
        let mut g = Graph::new();
        let v = g.constant_matrix(x.len(), 1, x.to_vec());
        let l = loss_focal(&mut g, v, t, alpha, gamma).unwrap();
        g.scalar(l)
    }

    #[test]
    fn focal_cases() {
        let x: [f64; 3] = [0.3, -1.2, 2.0];
        let t = [1.0, 0.0, 0.0];
        let bce: f64 = x
            .iter()
            .zip(&t)
            .map(|(&x, &t)| {
                let p: f64 = 1.0 / (1.0 + (-x).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((focal(&x, &t, 0.5, 0.0) - 0.5 * bce).abs() < 1e-12);
        assert!(focal(&[40.0], &[1.0], 0.25, 2.0) < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x: Vec<f64> = (0..7).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let t: Vec<f64> = (0..7).map(|_| rng.gen_range(0..2) as f64).collect();
            assert!((focal(&x, &t, 0.25, 2.0) - focal_oracle(&x, &t, 0.25, 2.0)).abs() < 1e-12);
        }
    }

    fn box_losses(p: BoxCxCyWh, gt: BoxCxCyWh) -> (f64, f64, bool) {
        let mut g = Graph::new();
        let v = g.constant_matrix(1, 4, p.to_vec());
        let b = loss_box(&mut g, v, &gt).unwrap();
        (g.scalar(b.l1), g.scalar(b.giou), b.degenerate)
    }

    #[test]
    fn box_cases() {
        let b = [0.4, 0.5, 0.2, 0.3];
        let (l1, giou, _) = box_losses(b, b);
        assert!(l1.abs() < 1e-15 && giou.abs() < 1e-12);
        let (_, giou, _) = box_losses([0.01, 0.01, 1e-3, 1e-3], [0.99, 0.99, 1e-3, 1e-3]);
        assert!(giou > 1.99 && giou <= 2.0);
        let (_, _, degenerate) = box_losses([0.5, 0.5, 0.0, 0.2], b);
        assert!(degenerate);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut r = || [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.01..0.5), rng.gen_range(0.01..0.5)];
            let (p, q) = (r(), r());
            let (l1, gl, _) = box_losses(p, q);
            let direct = 1.0 - boxes::giou(&p, &q);
            assert!((gl - direct).abs() < 1e-12);
            assert!(1.0 - gl <= boxes::iou(&p, &q) + 1e-12);
            assert!((0.0..=2.0).contains(&gl));
            let l1_direct: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
            assert!((l1 - l1_direct).abs() < 1e-12);
        }
    }

    fn mask_loss(logits: &[f64], gt: &Mask) -> (f64, f64) {
        let mut g = Graph::new();
        let v = g.constant_matrix(logits.len(), 1, logits.to_vec());
        let m = loss_mask(&mut g, v, gt, 0.25, 2.0).unwrap();
        (g.scalar(m.focal), g.scalar(m.dice))
    }

    #[test]
    fn mask_cases() {
        let mut gt = Mask::empty(4, 4);
        for c in 0..4 {
            gt.set(0, c, true);
            gt.set(1, c, true);
        }
        let perfect: Vec<f64> = gt.bits.iter().map(|&b| if b { 30.0 } else { -30.0 }).collect();
        let (f, d) = mask_loss(&perfect, &gt);
        assert!(f + d < 1e-3);
        // zero logits, half-full mask: dice = 1 - (2 * 0.5 * 8 + 1) / (8 + 8 + 1)
        let (_, d) = mask_loss(&[0.0; 16], &gt);
        assert!((d - (1.0 - 9.0 / 17.0)).abs() < 1e-12);
        let (f, d) = mask_loss(&[-30.0; 16], &Mask::empty(4, 4));
        assert!(f < 1e-12 && d < 1e-9);
    }

    fn emb_loss(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
        let mut g = Graph::new();
        let av: Vec<Var> = a.iter().map(|r| g.constant_matrix(1, r.len(), r.clone())).collect();
        let bv: Vec<Var> = b.iter().map(|r| g.constant_matrix(1, r.len(), r.clone())).collect();
        let l = loss_emb(&mut g, &av, &bv, tau).unwrap();
        g.scalar(l)
    }

    #[test]
    fn embedding_cases() {
        assert_eq!(emb_loss(&[vec![1.0, 2.0]], &[vec![3.0, 1.0]], 0.07), 0.0);
        // orthogonal, identical across frames: each term is -log(e^{1/tau} / (e^{1/tau} + 2))
        let e = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let tau: f64 = 0.07;
        let expect = -((1.0 / tau).exp() / ((1.0 / tau).exp() + 2.0)).ln();
        assert!((emb_loss(&e, &e, tau) - expect).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let perm = [2, 0, 3, 1];
        let pa: Vec<_> = perm.iter().map(|&i| a[i].clone()).collect();
        let pb: Vec<_> = perm.iter().map(|&i| b[i].clone()).collect();
        assert!((emb_loss(&a, &b, tau) - emb_loss(&pa, &pb, tau)).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut g = Graph::new();
        let vals = [0.7, 1.3, 0.2, 0.05, 2.5];
        let v: Vec<Var> = vals.iter().map(|&x| g.constant_matrix(1, 1, vec![x])).collect();
        let parts = LossParts {
            referring: v[0],
            boxes: v[1],
            mask: v[2],
            embedding: v[3],
            expression: v[4],
        };
        let zero = LossWeights {
            lambda_ref: 0.0,
            lambda_box: 0.0,
            lambda_mask: 0.0,
            lambda_emb: 0.0,
            lambda_expr: 0.0,
            ..LossWeights::default()
        };
        let t = total_loss(&mut g, &parts, &zero).unwrap();
        assert_eq!(g.scalar(t), 0.0);
        let only_mask = LossWeights { lambda_mask: 1.0, ..zero };
        let t = total_loss(&mut g, &parts, &only_mask).unwrap();
        assert_eq!(g.scalar(t), 0.2);
        let w = LossWeights::default();
        let t = total_loss(&mut g, &parts, &w).unwrap();
        let lambdas = [w.lambda_ref, w.lambda_box, w.lambda_mask, w.lambda_emb, w.lambda_expr];
        let dot = lambdas.iter().zip(&vals).fold(0.0, |acc, (l, x)| acc + l * x);
        assert_eq!(g.scalar(t), dot);
        let doubled = LossWeights { lambda_box: 2.0 * w.lambda_box, ..w };
        let t2 = total_loss(&mut g, &parts, &doubled).unwrap();
        assert!((g.scalar(t2) - g.scalar(t) - w.lambda_box * vals[1]).abs() < 1e-12);
        let nan = g.constant_matrix(1, 1, vec![f64::NAN]);
        let bad = LossParts { embedding: nan, ..parts };
        assert!(matches!(total_loss(&mut g, &bad, &w), Err(Error::NonFinite(n)) if n == "emb"));
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gt = Mask::empty(3, 4);
        gt.set(1, 1, true);
        gt.set(1, 2, true);
        gt.set(2, 2, true);
        let targets = [1.0, 0.0, 0.0, 1.0, 0.0];
        let inputs = vec![
            Tensor::matrix(5, 1, (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap(),
            Tensor::matrix(1, 4, vec![0.43, 0.52, 0.3, 0.25]).unwrap(),
            Tensor::matrix(12, 1, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap(),
            Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        ];
        let rep = check_gradients::<_, Error>(
            |g, v| {
                let r = loss_focal(g, v[0], &targets, 0.25, 2.0)?;
                let b = loss_box(g, v[1], &[0.5, 0.5, 0.2, 0.3])?;
                let m = loss_mask(g, v[2], &gt, 0.25, 2.0)?;
                let rows = |g: &mut Graph, x: Var| -> Result<Vec<Var>> { (0..3).map(|i| Ok(g.slice_rows(x, i, 1)?)).collect() };
                let (a, bb) = (rows(g, v[3])?, rows(g, v[4])?);
                let e = loss_emb(g, &a, &bb, 0.5)?;
                let bx = g.add(b.l1, b.giou)?;
                let mk = g.add(m.focal, m.dice)?;
                let parts = LossParts {
                    referring: r,
                    boxes: bx,
                    mask: mk,
                    embedding: e,
                    expression: e,
                };
                total_loss(g, &parts, &LossWeights::default())
            },
            &inputs,
            1e-5,
            1,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}
