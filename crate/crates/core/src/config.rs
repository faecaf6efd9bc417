//! Flat `key=value` configuration shared by generation, training and
//! evaluation. Blank lines and `#` comments are ignored; unknown keys are
//! rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {value}")]
    BadValue { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Synthetic scene generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    pub holdout: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub speed: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            holdout: 40,
            frame_height: 24,
            frame_width: 24,
            frames: 4,
            min_objects: 3,
            max_objects: 3,
            min_size: 7,
            max_size: 10,
            speed: 1,
        }
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature width shared by all streams.
    pub dim: usize,
    /// Common padded expression length.
    pub expr_len: usize,
    pub patch: usize,
    pub heads: usize,
    pub queries: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    pub audio_stride: usize,
    pub mask_channels: usize,
    /// Run the dynamic mask head at frame resolution on upsampled visual
    /// features plus pixel colours, instead of on the patch grid.
    pub mask_detail: bool,
    /// Expression-as-query injection.
    pub expr_query: bool,
    /// Sinusoidal positional encodings; off only in tests.
    pub positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            expr_len: 16,
            patch: 4,
            heads: 4,
            queries: 8,
            decoder_layers: 2,
            ffn_hidden: 64,
            mlp_hidden: 32,
            mlp_layers: 2,
            audio_stride: 3,
            mask_channels: 8,
            mask_detail: true,
            expr_query: true,
            positional: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_ref: f64,
    pub lambda_box: f64,
    pub lambda_mask: f64,
    pub lambda_emb: f64,
    pub lambda_expr: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub mask_dice: f64,
    pub mask_focal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ref: 2.0,
            lambda_box: 1.0,
            lambda_mask: 1.0,
            lambda_emb: 1.0,
            lambda_expr: 1.0,
            box_l1: 5.0,
            box_giou: 2.0,
            mask_dice: 5.0,
            mask_focal: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub align_batch: usize,
    pub clip_norm: f64,
    pub tau: f64,
    pub emb_tau: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 0.05,
            steps: 15000,
            batch_size: 2,
            align_batch: 16,
            clip_norm: 1.0,
            tau: 0.07,
            emb_tau: 0.07,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub mask_threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.7,
            score_threshold: 0.5,
            mask_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
        }),
    }
}

impl Config {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (d, m, t, i) = (&mut self.data, &mut self.model, &mut self.train, &mut self.infer);
        let w = &mut t.weights;
        match key {
            "scenes" => d.scenes = parse(key, value)?,
            "holdout" => d.holdout = parse(key, value)?,
            "frame_size" => {
                let s = parse(key, value)?;
                d.frame_height = s;
                d.frame_width = s;
            }
            "frame_height" => d.frame_height = parse(key, value)?,
            "frame_width" => d.frame_width = parse(key, value)?,
            "frames" => d.frames = parse(key, value)?,
            "objects" => {
                let n = parse(key, value)?;
                d.min_objects = n;
                d.max_objects = n;
            }
            "min_objects" => d.min_objects = parse(key, value)?,
            "max_objects" => d.max_objects = parse(key, value)?,
            "min_size" => d.min_size = parse(key, value)?,
            "max_size" => d.max_size = parse(key, value)?,
            "speed" => d.speed = parse(key, value)?,
            "C" => m.dim = parse(key, value)?,
            "L" => m.expr_len = parse(key, value)?,
            "P" => m.patch = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "queries" => m.queries = parse(key, value)?,
            "decoder_layers" => m.decoder_layers = parse(key, value)?,
            "ffn_hidden" => m.ffn_hidden = parse(key, value)?,
            "mlp_hidden" => m.mlp_hidden = parse(key, value)?,
            "mlp_layers" => m.mlp_layers = parse(key, value)?,
            "audio_stride" => m.audio_stride = parse(key, value)?,
            "mask_channels" => m.mask_channels = parse(key, value)?,
            "mask_detail" => m.mask_detail = parse_bool(key, value)?,
            "expr_query" => m.expr_query = parse_bool(key, value)?,
            "positional" => m.positional = parse_bool(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "align_batch" => t.align_batch = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "tau" => t.tau = parse(key, value)?,
            "emb_tau" => t.emb_tau = parse(key, value)?,
            "focal_alpha" => t.focal_alpha = parse(key, value)?,
            "focal_gamma" => t.focal_gamma = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "lambda_ref" => w.lambda_ref = parse(key, value)?,
            "lambda_box" => w.lambda_box = parse(key, value)?,
            "lambda_mask" => w.lambda_mask = parse(key, value)?,
            "lambda_emb" => w.lambda_emb = parse(key, value)?,
            "lambda_expr" => w.lambda_expr = parse(key, value)?,
            "box_l1" => w.box_l1 = parse(key, value)?,
            "box_giou" => w.box_giou = parse(key, value)?,
            "mask_dice" => w.mask_dice = parse(key, value)?,
            "mask_focal" => w.mask_focal = parse(key, value)?,
            "nms_iou" => i.nms_iou = parse(key, value)?,
            "score_threshold" => i.score_threshold = parse(key, value)?,
            "mask_threshold" => i.mask_threshold = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses `key=value` text on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let (d, m, t) = (&self.data, &self.model, &self.train);
        if m.dim == 0 || m.heads == 0 || m.dim % m.heads != 0 {
            return bad("C must be a positive multiple of heads");
        }
        if m.patch == 0 || d.frame_height % m.patch != 0 || d.frame_width % m.patch != 0 {
            return bad("frame dimensions must be divisible by P");
        }
        if m.expr_len == 0 || m.audio_stride == 0 || m.mlp_layers == 0 || m.queries == 0 {
            return bad("L, audio_stride, mlp_layers and queries must be positive");
        }
        if t.tau.is_nan() || t.tau <= 0.0 || t.emb_tau.is_nan() || t.emb_tau <= 0.0 {
            return bad("temperatures must be positive");
        }
        if t.lr.is_nan() || t.lr < 0.0 || t.weight_decay < 0.0 {
            return bad("lr and weight_decay must be non-negative");
        }
        let w = &t.weights;
        let lambdas = [
            w.lambda_ref,
            w.lambda_box,
            w.lambda_mask,
            w.lambda_emb,
            w.lambda_expr,
            w.box_l1,
            w.box_giou,
            w.mask_dice,
            w.mask_focal,
        ];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("loss weights must be finite and non-negative");
        }
        if d.min_objects == 0 || d.min_objects > d.max_objects || d.frames == 0 {
            return bad("object counts and frame count must be positive");
        }
        if d.max_objects > m.queries {
            return bad("queries must cover the maximum object count");
        }
        Ok(())
    }

    /// Canonical text form; `parse_str(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let (d, m, t, i) = (&self.data, &self.model, &self.train, &self.infer);
        let w = &t.weights;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("scenes", d.scenes.to_string());
        kv("holdout", d.holdout.to_string());
        kv("frame_height", d.frame_height.to_string());
        kv("frame_width", d.frame_width.to_string());
        kv("frames", d.frames.to_string());
        kv("min_objects", d.min_objects.to_string());
        kv("max_objects", d.max_objects.to_string());
        kv("min_size", d.min_size.to_string());
        kv("max_size", d.max_size.to_string());
        kv("speed", d.speed.to_string());
        kv("C", m.dim.to_string());
        kv("L", m.expr_len.to_string());
        kv("P", m.patch.to_string());
        kv("heads", m.heads.to_string());
        kv("queries", m.queries.to_string());
        kv("decoder_layers", m.decoder_layers.to_string());
        kv("ffn_hidden", m.ffn_hidden.to_string());
        kv("mlp_hidden", m.mlp_hidden.to_string());
        kv("mlp_layers", m.mlp_layers.to_string());
        kv("audio_stride", m.audio_stride.to_string());
        kv("mask_channels", m.mask_channels.to_string());
        kv("mask_detail", m.mask_detail.to_string());
        kv("expr_query", m.expr_query.to_string());
        kv("positional", m.positional.to_string());
        kv("lr", t.lr.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("steps", t.steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("align_batch", t.align_batch.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("tau", t.tau.to_string());
        kv("emb_tau", t.emb_tau.to_string());
        kv("focal_alpha", t.focal_alpha.to_string());
        kv("focal_gamma", t.focal_gamma.to_string());
        kv("seed", t.seed.to_string());
        kv("lambda_ref", w.lambda_ref.to_string());
        kv("lambda_box", w.lambda_box.to_string());
        kv("lambda_mask", w.lambda_mask.to_string());
        kv("lambda_emb", w.lambda_emb.to_string());
        kv("lambda_expr", w.lambda_expr.to_string());
        kv("box_l1", w.box_l1.to_string());
        kv("box_giou", w.box_giou.to_string());
        kv("mask_dice", w.mask_dice.to_string());
        kv("mask_focal", w.mask_focal.to_string());
        kv("nms_iou", i.nms_iou.to_string());
        kv("score_threshold", i.score_threshold.to_string());
        kv("mask_threshold", i.mask_threshold.to_string());
        s
    }
}
