use serde::{Deserialize, Serialize};

/// Binary `height x width` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "mask size");
        Self { height, width, bits }
    }

    /// Thresholds probabilities (or any scores) at `threshold`, strictly above.
    pub fn from_scores(height: usize, width: usize, scores: &[f64], threshold: f64) -> Self {
        Self::from_bits(height, width, scores.iter().map(|&s| s > threshold).collect())
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn union(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count()
    }

    pub fn or(&self, other: &Mask) -> Mask {
        Mask::from_bits(
            self.height,
            self.width,
            self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        )
    }

    /// Tight normalised `(cx, cy, w, h)` box, `None` for an empty mask.
    pub fn tight_box(&self) -> Option<[f64; 4]> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    x0 = x0.min(c);
                    y0 = y0.min(r);
                    x1 = x1.max(c + 1);
                    y1 = y1.max(r + 1);
                }
            }
        }
        if x0 == usize::MAX {
            return None;
        }
        let (w, h) = (self.width as f64, self.height as f64);
        Some([
            (x0 + x1) as f64 / 2.0 / w,
            (y0 + y1) as f64 / 2.0 / h,
            (x1 - x0) as f64 / w,
            (y1 - y0) as f64 / h,
        ])
    }

    /// Run lengths alternating background/foreground, starting with background.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut cur = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == cur {
                len += 1;
            } else {
                runs.push(len);
                cur = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    /// Inverse of [`Mask::to_rle`]; `None` when the runs do not cover the mask.
    pub fn from_rle(height: usize, width: usize, runs: &[u32]) -> Option<Self> {
        let mut bits = Vec::with_capacity(height * width);
        let mut cur = false;
        for &r in runs {
            if bits.len() + r as usize > height * width {
                return None;
            }
            bits.extend(std::iter::repeat_n(cur, r as usize));
            cur = !cur;
        }
        (bits.len() == height * width).then_some(Self { height, width, bits })
    }
}
