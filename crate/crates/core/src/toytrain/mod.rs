//! Small, fully deterministic stand-in for a segmentation network: synthetic
//! data, hand-crafted features, a linear-softmax model, Dice + CE loss and
//! the cyclic-schedule training loop that produces checkpoint members.

pub mod features;
pub mod loss;
pub mod model;
pub mod synth;
pub mod train;

use thiserror::Error;

pub use features::{extract_features, FeatureMap, FEATURE_DIM};
pub use loss::{batch_loss, gradient, loss, LossBreakdown, LossWeights, DICE_SMOOTH};
pub use model::{forward, ModelWeights};
pub use synth::{
    generate_dataset, load_dataset, write_dataset, Dataset, DatasetIndex, Split,
    SyntheticDatasetConfig, SyntheticImage,
};
pub use train::{
    train, train_in_memory, CheckpointRecord, EpochLog, Optimizer, RunManifest, TrainConfig,
    TrainOutcome,
};

use crate::gridmaps::{GridError, NpyError};
use crate::schedule::ScheduleError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("weight {index} is not finite")]
    NonFiniteWeights { index: usize },
    #[error("non-finite loss {loss} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, loss: f64 },
    #[error("dataset digest mismatch: dataset.json says {expected}, files hash to {found}")]
    DigestMismatch { expected: String, found: String },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Npy(#[from] NpyError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
