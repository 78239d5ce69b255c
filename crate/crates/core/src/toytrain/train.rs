//! Full-batch gradient descent under the cyclic schedule, keeping the
//! checkpoints named by the sampling plan.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{extract_features, FeatureMap, FEATURE_DIM};
use super::loss::{batch_loss, gradient, LossBreakdown, LossWeights};
use super::model::ModelWeights;
use super::synth::{load_dataset, Split};
use super::TrainError;
use crate::fmt::sig17;
use crate::gridmaps::LabelMask;
use crate::schedule::{sampling_plan, SamplingPlan, ScheduleParams};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub cycle: usize,
    pub lr: f64,
    /// Relative to the run directory.
    pub weights_path: String,
    /// Summed training loss of the saved weights.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub schedule: ScheduleParams,
    pub sampling_plan: SamplingPlan,
    pub dataset_digest: String,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub momentum: f64,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub checkpoints: Vec<CheckpointRecord>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, TrainError> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: RunManifest = serde_json::from_str(&text)?;
        if manifest.format_version != MANIFEST_FORMAT_VERSION {
            return Err(TrainError::InvalidConfig(format!(
                "unsupported manifest format_version {}",
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    pub fn checkpoint_path(&self, run_dir: &Path, index: usize) -> PathBuf {
        run_dir.join(&self.checkpoints[index].weights_path)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub schedule: ScheduleParams,
    pub window: usize,
    pub stride: usize,
    pub loss_weights: LossWeights,
    /// Heavy-ball coefficient; 0 gives plain gradient descent.
    pub momentum: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub cycle: usize,
    pub t_c: usize,
    pub lr: f64,
    /// Loss of the weights the step started from.
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub history: Vec<EpochLog>,
}

/// Optimizer settings shared by the in-memory and on-disk training entry
/// points.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub schedule: ScheduleParams,
    pub plan: SamplingPlan,
    pub loss_weights: LossWeights,
    pub momentum: f64,
}

pub fn validate_momentum(momentum: f64) -> Result<(), TrainError> {
    if (0.0..1.0).contains(&momentum) {
        Ok(())
    } else {
        Err(TrainError::InvalidConfig(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )))
    }
}

/// Runs the training loop in memory, one full-batch step per epoch:
/// `v = momentum * v + grad; w -= lr * v`, starting from zero weights.
/// `on_checkpoint` is called with each planned epoch and the weights after
/// that epoch's step.
pub fn train_in_memory(
    features: &[FeatureMap],
    masks: &[LabelMask],
    num_classes: usize,
    opt: &Optimizer,
    mut on_checkpoint: impl FnMut(usize, &ModelWeights, LossBreakdown) -> Result<(), TrainError>,
) -> Result<(ModelWeights, Vec<EpochLog>), TrainError> {
    let (schedule, plan) = (&opt.schedule, &opt.plan);
    let (lw, momentum) = (opt.loss_weights, opt.momentum);
    schedule.validate()?;
    validate_momentum(momentum)?;
    let mut weights = ModelWeights::zeros(num_classes, FEATURE_DIM);
    let mut velocity = ModelWeights::zeros(num_classes, FEATURE_DIM);
    let mut history = Vec::with_capacity(schedule.total_epochs());
    for epoch in 1..=schedule.total_epochs() {
        let (cycle, t_c) = schedule.position(epoch)?;
        let lr = schedule.lr_in_cycle(t_c);
        let (loss, grad) = gradient(&weights, features, masks, lw)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, loss: loss.total });
        }
        history.push(EpochLog {
            epoch,
            cycle,
            t_c,
            lr,
            loss,
        });
        for (v, g) in velocity.data_mut().iter_mut().zip(grad.data()) {
            *v = momentum * *v + g;
        }
        weights.sub_scaled(lr, &velocity);
        if plan.contains(epoch) {
            let saved_loss = batch_loss(&weights, features, masks, lw)?;
            if !saved_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    loss: saved_loss.total,
                });
            }
            on_checkpoint(epoch, &weights, saved_loss)?;
        }
    }
    Ok((weights, history))
}

fn history_csv(history: &[EpochLog]) -> String {
    let mut out = String::from("epoch,cycle,t_c,lr,loss,ce,dice\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            h.epoch,
            h.cycle,
            h.t_c,
            sig17(h.lr),
            sig17(h.loss.total),
            sig17(h.loss.ce),
            sig17(h.loss.dice)
        );
    }
    out
}

/// Trains on the train split of a dataset directory and writes
/// `checkpoints/epoch_NNNN.npy`, `training_log.csv` and `manifest.json`
/// into the output directory.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.schedule.validate()?;
    config.loss_weights.validate()?;
    validate_momentum(config.momentum)?;
    let plan = sampling_plan(&config.schedule, config.window, config.stride)?;
    let (index, items) = load_dataset(&config.dataset_dir)?;

    let train_ids = index.splits.get(Split::Train);
    let features: Vec<FeatureMap> = train_ids
        .par_iter()
        .map(|&i| extract_features(&items[i].0))
        .collect();
    let masks: Vec<LabelMask> = train_ids.iter().map(|&i| items[i].1.clone()).collect();

    let ckpt_dir = config.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|source| TrainError::Io {
        path: ckpt_dir.display().to_string(),
        source,
    })?;

    let opt = Optimizer {
        schedule: config.schedule,
        plan,
        loss_weights: config.loss_weights,
        momentum: config.momentum,
    };
    let mut records = Vec::with_capacity(opt.plan.len());
    let (_, history) = train_in_memory(
        &features,
        &masks,
        index.num_classes,
        &opt,
        |epoch, weights, loss| {
            let (cycle, _) = config.schedule.position(epoch)?;
            let rel = format!("checkpoints/epoch_{epoch:04}.npy");
            weights.save(config.out_dir.join(&rel))?;
            records.push(CheckpointRecord {
                epoch,
                cycle,
                lr: crate::schedule::lr_at(&config.schedule, epoch)?,
                weights_path: rel,
                loss: loss.total,
            });
            Ok(())
        },
    )?;

    let manifest = RunManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        schedule: config.schedule,
        sampling_plan: opt.plan,
        dataset_digest: index.digest.clone(),
        seed: config.seed,
        loss_weights: config.loss_weights,
        momentum: config.momentum,
        num_classes: index.num_classes,
        feature_dim: FEATURE_DIM,
        checkpoints: records,
    };
    let log_path = config.out_dir.join("training_log.csv");
    fs::write(&log_path, history_csv(&history)).map_err(|source| TrainError::Io {
        path: log_path.display().to_string(),
        source,
    })?;
    let manifest_path = config.out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&manifest_path, json).map_err(|source| TrainError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    Ok(TrainOutcome { manifest, history })
}
