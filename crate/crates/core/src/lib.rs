//! Checkpoint-ensemble uncertainty for semantic segmentation.
//!
//! Checkpoints sampled from the low-learning-rate tail of each cycle of a
//! cyclic schedule are treated as posterior samples. Their averaged softmax
//! gives the prediction, and their spread (per-class std) and the entropy
//! of the average give pixel-wise uncertainty maps. The crate also covers
//! segmentation metrics and uncertainty calibration.

pub mod calibration;
pub mod cli;
pub mod ensemble;
pub mod fmt;
pub mod gridmaps;
pub mod schedule;
pub mod segmetrics;
pub mod toytrain;
