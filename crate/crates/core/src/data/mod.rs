//! Synthetic referring videos: moving coloured shapes with templated text
//! expressions and pseudo-phoneme audio renditions of them.

pub mod format;
pub mod vocab;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::DataConfig;
use crate::mask::Mask;

pub use format::{load_dataset, save_dataset, FormatError};

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("unknown text token {0}")]
    UnknownWord(u32),
    #[error("could not place {0} non-overlapping objects")]
    Placement(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Still,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [230, 210, 40],
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 5] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Still];

    /// Per-frame displacement `(dx, dy)` in units of the configured speed.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Motion::Left => (-1, 0),
            Motion::Right => (1, 0),
            Motion::Up => (0, -1),
            Motion::Down => (0, 1),
            Motion::Still => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
    /// Top-left corner of the bounding square in frame 0.
    pub x: i64,
    pub y: i64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub frame_height: usize,
    pub frame_width: usize,
    pub num_frames: usize,
    pub speed: usize,
    pub objects: Vec<ObjectSpec>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Audio,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionRecord {
    pub object_id: usize,
    pub modality: Modality,
    pub variant_id: usize,
    pub tokens: Vec<u32>,
    /// Paraphrase class; unique per (object, class) within a scene.
    pub semantic_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub scene: SceneSpec,
    /// `num_frames` buffers of `H * W * 3` bytes.
    pub frames: Vec<Vec<u8>>,
    /// Indexed `[object][frame]`.
    pub gt_masks: Vec<Vec<Mask>>,
    /// Normalised `(cx, cy, w, h)`, indexed `[object][frame]`.
    pub gt_boxes: Vec<Vec<[f64; 4]>>,
    pub expressions: Vec<ExpressionRecord>,
}

impl VideoSample {
    pub fn num_objects(&self) -> usize {
        self.scene.objects.len()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn expressions_of(&self, object_id: usize, modality: Modality) -> impl Iterator<Item = &ExpressionRecord> {
        self.expressions
            .iter()
            .filter(move |e| e.object_id == object_id && e.modality == modality)
    }

    /// First expression of `modality` sharing `semantic_id`.
    pub fn counterpart(&self, semantic_id: usize, modality: Modality) -> Option<&ExpressionRecord> {
        self.expressions
            .iter()
            .find(|e| e.semantic_id == semantic_id && e.modality == modality)
    }
}

/// Maximum filler tokens inserted before each word of an audio rendition.
pub const MAX_FILLERS: usize = 2;

/// Pronunciation-table concatenation of a text expression.
pub fn pronounce_sequence(text_tokens: &[u32]) -> Result<Vec<u32>, DataError> {
    let mut out = Vec::new();
    for &t in text_tokens {
        out.extend(vocab::pronounce(t).ok_or(DataError::UnknownWord(t))?);
    }
    Ok(out)
}

/// Pseudo-phoneme rendition of a text expression with seeded fillers.
pub fn derive_audio_tokens(text_tokens: &[u32], variant_seed: u64) -> Result<Vec<u32>, DataError> {
    derive_audio_tokens_with(text_tokens, variant_seed, MAX_FILLERS)
}

/// As [`derive_audio_tokens`] with `0..=max_fillers` fillers before each word.
pub fn derive_audio_tokens_with(
    text_tokens: &[u32],
    variant_seed: u64,
    max_fillers: usize,
) -> Result<Vec<u32>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(variant_seed);
    let fillers: Vec<u32> = vocab::filler_tokens().collect();
    let mut out = Vec::new();
    for &t in text_tokens {
        let phones = vocab::pronounce(t).ok_or(DataError::UnknownWord(t))?;
        let k = rng.gen_range(0..=max_fillers);
        for _ in 0..k {
            out.push(*fillers.choose(&mut rng).expect("filler set is non-empty"));
        }
        out.extend(phones);
    }
    Ok(out)
}

/// Footprint of a shape inside its `size x size` bounding square.
pub fn glyph(shape: Shape, size: usize) -> Vec<bool> {
    let s = size as f64;
    let mut bits = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            bits[r * size + c] = match shape {
                Shape::Square => true,
                Shape::Circle => (y - s / 2.0).powi(2) + (x - s / 2.0).powi(2) <= (s / 2.0).powi(2),
                Shape::Triangle => (x - s / 2.0).abs() <= (r + 1) as f64 / 2.0,
            };
        }
    }
    bits
}

fn position(o: &ObjectSpec, t: usize, speed: usize) -> (i64, i64) {
    let (dx, dy) = o.motion.delta();
    let k = (t * speed) as i64;
    (o.x + dx * k, o.y + dy * k)
}

fn check_config(cfg: &DataConfig) -> Result<(), DataError> {
    let bad = |m: &str| Err(DataError::Config(m.to_string()));
    if cfg.frame_height == 0 || cfg.frame_width == 0 || cfg.frames == 0 {
        return bad("frame dimensions and count must be positive");
    }
    if cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return bad("need 1 <= min_objects <= max_objects");
    }
    if cfg.max_objects > 4 {
        return bad("at most 4 objects per scene");
    }
    if cfg.max_objects > Color::ALL.len() {
        return bad("more objects than distinct attribute tuples");
    }
    if cfg.min_size == 0 || cfg.min_size > cfg.max_size {
        return bad("need 1 <= min_size <= max_size");
    }
    let travel = (cfg.frames - 1) * cfg.speed;
    if cfg.max_size + travel + 2 > cfg.frame_height.min(cfg.frame_width) {
        return bad("objects cannot stay inside the frame");
    }
    Ok(())
}

/// Per-sample stream of a dataset seed.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generates `cfg.scenes` samples; deterministic in `(cfg, seed)`.
pub fn generate_dataset(cfg: &DataConfig, seed: u64) -> Result<Vec<VideoSample>, DataError> {
    check_config(cfg)?;
    (0..cfg.scenes).map(|i| generate_sample(cfg, seed, i)).collect()
}

/// Generates sample `index` of the dataset seeded with `seed`.
pub fn generate_sample(cfg: &DataConfig, seed: u64, index: usize) -> Result<VideoSample, DataError> {
    check_config(cfg)?;
    let mut rng = sample_rng(seed, index);
    let scene_seed: u64 = rng.gen();
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut colors = Color::ALL.to_vec();
    colors.shuffle(&mut rng);

    let attrs: Vec<(Shape, Color, Motion)> = colors
        .iter()
        .take(n)
        .map(|&c| (*Shape::ALL.choose(&mut rng).unwrap(), c, *Motion::ALL.choose(&mut rng).unwrap()))
        .collect();
    let objects = (0..50)
        .find_map(|_| place_objects(cfg, &attrs, &mut rng))
        .ok_or(DataError::Placement(n))?;

    let scene = SceneSpec {
        frame_height: cfg.frame_height,
        frame_width: cfg.frame_width,
        num_frames: cfg.frames,
        speed: cfg.speed,
        objects,
        seed: scene_seed,
    };
    render(scene, &mut rng)
}

/// Samples sizes and positions; `None` when the objects do not fit.
fn place_objects(cfg: &DataConfig, attrs: &[(Shape, Color, Motion)], rng: &mut ChaCha8Rng) -> Option<Vec<ObjectSpec>> {
    let (h, w) = (cfg.frame_height as i64, cfg.frame_width as i64);
    let travel = ((cfg.frames - 1) * cfg.speed) as i64;
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(attrs.len());
    for &(shape, color, motion) in attrs {
        let mut placed = false;
        for _ in 0..100 {
            let size = rng.gen_range(cfg.min_size..=cfg.max_size);
            let s = size as i64;
            let (dx, dy) = motion.delta();
            // Keep a one-pixel margin in every frame.
            let (xlo, xhi) = (1 + (-dx).max(0) * travel, w - 1 - s - dx.max(0) * travel);
            let (ylo, yhi) = (1 + (-dy).max(0) * travel, h - 1 - s - dy.max(0) * travel);
            if xlo > xhi || ylo > yhi {
                continue;
            }
            let cand = ObjectSpec {
                shape,
                color,
                motion,
                x: rng.gen_range(xlo..=xhi),
                y: rng.gen_range(ylo..=yhi),
                size,
            };
            let clear = objects.iter().all(|o| {
                (0..cfg.frames).all(|t| {
                    let (ax, ay) = position(o, t, cfg.speed);
                    let (bx, by) = position(&cand, t, cfg.speed);
                    let (sa, sb) = (o.size as i64, cand.size as i64);
                    // Boxes separated by at least one pixel.
                    ax + sa < bx || bx + sb < ax || ay + sa < by || by + sb < ay
                })
            });
            if clear {
                objects.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

fn render(scene: SceneSpec, rng: &mut ChaCha8Rng) -> Result<VideoSample, DataError> {
    let (h, w) = (scene.frame_height, scene.frame_width);
    let mut frames = vec![vec![0u8; h * w * 3]; scene.num_frames];
    let mut gt_masks = Vec::with_capacity(scene.objects.len());
    let mut gt_boxes = Vec::with_capacity(scene.objects.len());
    for o in &scene.objects {
        let g = glyph(o.shape, o.size);
        let mut masks = Vec::with_capacity(scene.num_frames);
        let mut boxes = Vec::with_capacity(scene.num_frames);
        for (t, frame) in frames.iter_mut().enumerate() {
            let (x0, y0) = position(o, t, scene.speed);
            let mut m = Mask::empty(h, w);
            for r in 0..o.size {
                for c in 0..o.size {
                    if g[r * o.size + c] {
                        let (y, x) = ((y0 + r as i64) as usize, (x0 + c as i64) as usize);
                        m.set(y, x, true);
                        frame[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&o.color.rgb());
                    }
                }
            }
            boxes.push(m.tight_box().expect("glyphs are never empty"));
            masks.push(m);
        }
        gt_masks.push(masks);
        gt_boxes.push(boxes);
    }

    let mut expressions = Vec::new();
    for (oid, o) in scene.objects.iter().enumerate() {
        for class in 0..vocab::NUM_PARAPHRASES {
            let tokens: Vec<u32> = vocab::describe(o.shape, o.color, o.motion, class)
                .iter()
                .map(|w| vocab::word_id(w).expect("template words are in the vocabulary"))
                .collect();
            let semantic_id = oid * vocab::NUM_PARAPHRASES + class;
            for v in 0..2 {
                expressions.push(ExpressionRecord {
                    object_id: oid,
                    modality: Modality::Audio,
                    variant_id: class * 2 + v,
                    tokens: derive_audio_tokens(&tokens, rng.gen())?,
                    semantic_id,
                });
            }
            expressions.push(ExpressionRecord {
                object_id: oid,
                modality: Modality::Text,
                variant_id: class,
                tokens,
                semantic_id,
            });
        }
    }
    // Text first, then audio, each ordered by (object, variant).
    expressions.sort_by_key(|e| (e.modality == Modality::Audio, e.object_id, e.variant_id));

    Ok(VideoSample {
        scene,
        frames,
        gt_masks,
        gt_boxes,
        expressions,
    })
}
