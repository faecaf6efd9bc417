//! Normalized `(cx, cy, w, h)` boxes.

pub type BoxCxCyWh = [f64; 4];

/// Smallest area used when a box degenerates to a line or point.
pub const MIN_AREA: f64 = 1e-9;

pub fn to_xyxy(b: &BoxCxCyWh) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

pub fn area(b: &BoxCxCyWh) -> f64 {
    b[2].max(0.0) * b[3].max(0.0)
}

fn intersection(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

pub fn iou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    let (xa, xb) = (to_xyxy(a), to_xyxy(b));
    let inter = intersection(&xa, &xb);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU; areas are clamped at [`MIN_AREA`].
pub fn giou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    let (xa, xb) = (to_xyxy(a), to_xyxy(b));
    let inter = intersection(&xa, &xb);
    let union = (area(a) + area(b) - inter).max(MIN_AREA);
    let enclose = ((xa[2].max(xb[2]) - xa[0].min(xb[0])) * (xa[3].max(xb[3]) - xa[1].min(xb[1]))).max(MIN_AREA);
    inter / union - (enclose - union) / enclose
}
