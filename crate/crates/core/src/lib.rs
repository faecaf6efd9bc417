//! Universal referring video object segmentation at desk scale.
//!
//! Text and audio referring expressions are aligned in a shared embedding
//! space, fused with visual features by bidirectional expression-visual
//! attention plus an audio-text shared-attention branch, and decoded by a
//! small query transformer into referring scores, boxes and dynamic-conv
//! masks. Everything runs on a self-contained reverse-mode tensor tape in
//! `f64`.

pub mod alignment;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod eva;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod graph;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Tensor, TensorError};
