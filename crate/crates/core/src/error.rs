use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::data::{DataError, FormatError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Shape(String),
    #[error("token {token} is outside the {vocab} vocabulary")]
    OutOfVocabulary { vocab: &'static str, token: u32 },
    #[error("expression has no unpadded rows")]
    EmptyExpression,
    #[error("no expression: both text and audio are absent")]
    NoExpression,
    #[error("{0} ground-truth objects but only {1} queries")]
    TooManyObjects(usize, usize),
    #[error("non-finite loss term `{0}`")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
