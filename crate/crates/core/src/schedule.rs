//! Cyclic polynomial-decay learning rate and the tail-of-cycle checkpoint
//! sampling plan.
//!
//! Epochs are 1-based globally and within a cycle: epoch `t` sits at
//! position `t_c = ((t - 1) mod T_c) + 1` of cycle `(t - 1) / T_c + 1`.
//! Each cycle decays polynomially from the peak rate to the floor over the
//! first `gamma * T_c` epochs, then holds the floor.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmt::sig17;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule parameters: {0}")]
    InvalidParams(String),
    #[error("epoch {epoch} outside 1..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    /// Peak learning rate at the start of every cycle.
    pub lr_max: f64,
    /// Floor learning rate reached at the end of the decay phase.
    pub lr_min: f64,
    /// Fraction of the cycle spent decaying, in (0, 1].
    pub gamma: f64,
    /// Polynomial decay power.
    pub power: f64,
    pub cycle_len: usize,
    pub num_cycles: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            lr_max: 0.1,
            lr_min: 0.01,
            gamma: 0.8,
            power: 0.9,
            cycle_len: 60,
            num_cycles: 3,
        }
    }
}

impl ScheduleParams {
    pub fn new(
        lr_max: f64,
        lr_min: f64,
        gamma: f64,
        power: f64,
        cycle_len: usize,
        num_cycles: usize,
    ) -> Result<Self, ScheduleError> {
        let p = Self {
            lr_max,
            lr_min,
            gamma,
            power,
            cycle_len,
            num_cycles,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: String| Err(ScheduleError::InvalidParams(m));
        if !(self.lr_min > 0.0 && self.lr_min.is_finite()) {
            return bad(format!("lr_min must be positive, got {}", self.lr_min));
        }
        if !(self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return bad(format!(
                "lr_max ({}) must be >= lr_min ({})",
                self.lr_max, self.lr_min
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return bad(format!("power must be positive, got {}", self.power));
        }
        if self.cycle_len == 0 || self.num_cycles == 0 {
            return bad("cycle_len and num_cycles must be >= 1".into());
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.cycle_len * self.num_cycles
    }

    /// 1-based cycle index and within-cycle position of a global epoch.
    pub fn position(&self, epoch: usize) -> Result<(usize, usize), ScheduleError> {
        if epoch == 0 || epoch > self.total_epochs() {
            return Err(ScheduleError::EpochOutOfRange {
                epoch,
                total: self.total_epochs(),
            });
        }
        let zero = epoch - 1;
        Ok((zero / self.cycle_len + 1, zero % self.cycle_len + 1))
    }

    /// Learning rate at a within-cycle position `t_c` in `1..=T_c`.
    pub fn lr_in_cycle(&self, t_c: usize) -> f64 {
        let decay_len = self.gamma * self.cycle_len as f64;
        let t = t_c as f64;
        if t <= decay_len {
            self.lr_min + (self.lr_max - self.lr_min) * (1.0 - t / decay_len).powf(self.power)
        } else {
            self.lr_min
        }
    }
}

/// Learning rate for a global 1-based epoch.
pub fn lr_at(params: &ScheduleParams, epoch: usize) -> Result<f64, ScheduleError> {
    let (_, t_c) = params.position(epoch)?;
    Ok(params.lr_in_cycle(t_c))
}

/// Global epochs at which checkpoints are kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub window: usize,
    pub stride: usize,
    pub epochs: Vec<usize>,
}

impl SamplingPlan {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn contains(&self, epoch: usize) -> bool {
        self.epochs.binary_search(&epoch).is_ok()
    }
}

/// Selects, in every cycle, the epochs in the last `window` positions whose
/// distance from the cycle end is a multiple of `stride`. The cycle-end
/// epoch is always selected.
pub fn sampling_plan(
    params: &ScheduleParams,
    window: usize,
    stride: usize,
) -> Result<SamplingPlan, ScheduleError> {
    params.validate()?;
    if window == 0 || window > params.cycle_len {
        return Err(ScheduleError::InvalidPlan(format!(
            "window must lie in 1..={}, got {window}",
            params.cycle_len
        )));
    }
    if stride == 0 || stride > window {
        return Err(ScheduleError::InvalidPlan(format!(
            "stride must lie in 1..={window}, got {stride}"
        )));
    }
    let t_c = params.cycle_len;
    let epochs = (0..params.num_cycles)
        .flat_map(|cycle| {
            (t_c - window + 1..=t_c)
                .filter(move |pos| (t_c - pos).is_multiple_of(stride))
                .map(move |pos| cycle * t_c + pos)
        })
        .collect();
    Ok(SamplingPlan {
        window,
        stride,
        epochs,
    })
}

/// One line of the schedule table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRow {
    pub epoch: usize,
    pub cycle: usize,
    pub t_c: usize,
    pub lr: f64,
}

pub fn schedule_rows(params: &ScheduleParams) -> Vec<ScheduleRow> {
    (1..=params.total_epochs())
        .map(|epoch| {
            let (cycle, t_c) = params.position(epoch).expect("epoch in range");
            ScheduleRow {
                epoch,
                cycle,
                t_c,
                lr: params.lr_in_cycle(t_c),
            }
        })
        .collect()
}

/// Renders the schedule as CSV with header `epoch,cycle,t_c,lr`.
pub fn emit_schedule_csv(params: &ScheduleParams) -> String {
    let mut out = String::from("epoch,cycle,t_c,lr\n");
    for row in schedule_rows(params) {
        let _ = writeln!(out, "{},{},{},{}", row.epoch, row.cycle, row.t_c, sig17(row.lr));
    }
    out
}
