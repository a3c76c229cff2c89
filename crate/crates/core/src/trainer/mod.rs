//! Worker runtime: data iterator, minibatch buffer, trainer and checkpoints.

pub mod checkpoint;
pub mod data;
pub mod model;

use thiserror::Error;

pub use checkpoint::{checkpoint_key, Checkpoint, CheckpointError};
pub use data::{
    fetch_partition, synthesize, Dataset, DatasetConfig, Manifest, MinibatchBuffer, Partition,
};
pub use model::{apply_update, train_step, Model, ModelConfig, ModelKind};

use crate::storage::StorageError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainerError {
    #[error("minibatch is empty")]
    EmptyMinibatch,
    #[error("non-finite loss ({loss}) or gradient")]
    NonFiniteLoss { loss: f64 },
    #[error("gradient has length {actual}, model has {expected} parameters")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
