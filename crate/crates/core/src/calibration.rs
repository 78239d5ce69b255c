//! Uncertainty calibration: reliability tables and the uncertainty
//! calibration error
//!
//! ```text
//! UCE = Σ_b (|S_b| / Σ_j |S_j|) · |ū_b − ē_b|
//! ```
//!
//! Per-bin sufficient statistics are integers (the uncertainty sum is kept
//! in 64.64 fixed point), so accumulation is exactly associative and
//! commutative: any split or ordering of pixels yields the same table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{EnsembleError, InferenceIndex};
use crate::fmt::sig17;
use crate::gridmaps::{GridError, LabelMask, Measure, UncertaintyMap};
use crate::segmetrics::{discover_masks, MetricsError};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("uncertainty map must be normalized to [0, 1]")]
    Unnormalized,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot merge tables: {0}")]
    Incompatible(String),
    #[error("reliability table holds no pixels")]
    EmptyTable,
    #[error("malformed reliability csv at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("prediction '{0}' has no ground-truth mask")]
    MissingGroundTruth(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

/// 1 where the predicted label differs from the ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ErrorMap {
    pub fn count(&self) -> u64 {
        self.data.iter().map(|&e| u64::from(e)).sum()
    }
}

pub fn error_map(pred: &LabelMask, gt: &LabelMask) -> Result<ErrorMap, CalibrationError> {
    if !pred.same_shape(gt) {
        return Err(CalibrationError::ShapeMismatch(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(ErrorMap {
        height: pred.height(),
        width: pred.width(),
        data: pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(p, g)| u8::from(p != g))
            .collect(),
    })
}

const FIXED_ONE: f64 = 18_446_744_073_709_551_616.0; // 2^64

/// Streaming per-bin sums for one measure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinAccumulator {
    measure: Measure,
    sum_u: Vec<u128>,
    sum_e: Vec<u64>,
    count: Vec<u64>,
}

impl BinAccumulator {
    pub fn new(measure: Measure, bins: usize) -> Result<Self, CalibrationError> {
        if bins < 2 {
            return Err(CalibrationError::TooFewBins(bins));
        }
        Ok(Self {
            measure,
            sum_u: vec![0; bins],
            sum_e: vec![0; bins],
            count: vec![0; bins],
        })
    }

    pub fn bins(&self) -> usize {
        self.count.len()
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    /// Bin `⌊u·B⌋`, with `u = 1` in the last bin.
    pub fn bin_of(&self, u: f64) -> usize {
        ((u * self.bins() as f64) as usize).min(self.bins() - 1)
    }

    pub fn add_pixel(&mut self, u: f64, error: bool) {
        let b = self.bin_of(u);
        self.sum_u[b] += (u * FIXED_ONE) as u128;
        self.sum_e[b] += u64::from(error);
        self.count[b] += 1;
    }

    /// Adds one image. The map must be normalized and carry this
    /// accumulator's measure.
    pub fn add(&mut self, u: &UncertaintyMap, errors: &ErrorMap) -> Result<(), CalibrationError> {
        if !u.is_normalized() {
            return Err(CalibrationError::Unnormalized);
        }
        if u.measure() != self.measure {
            return Err(CalibrationError::Incompatible(format!(
                "{} map added to a {} table",
                u.measure().name(),
                self.measure.name()
            )));
        }
        if u.height() != errors.height || u.width() != errors.width {
            return Err(CalibrationError::ShapeMismatch(format!(
                "uncertainty is {}x{}, error map is {}x{}",
                u.height(),
                u.width(),
                errors.height,
                errors.width
            )));
        }
        for (&v, &e) in u.data().iter().zip(&errors.data) {
            self.add_pixel(v, e != 0);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &BinAccumulator) -> Result<(), CalibrationError> {
        if other.measure != self.measure || other.bins() != self.bins() {
            return Err(CalibrationError::Incompatible(format!(
                "{} with {} bins vs {} with {} bins",
                self.measure.name(),
                self.bins(),
                other.measure.name(),
                other.bins()
            )));
        }
        for b in 0..self.bins() {
            self.sum_u[b] += other.sum_u[b];
            self.sum_e[b] += other.sum_e[b];
            self.count[b] += other.count[b];
        }
        Ok(())
    }

    pub fn table(&self) -> ReliabilityTable {
        let n = self.bins();
        let bins = (0..n)
            .map(|b| {
                let (low, high) = (b as f64 / n as f64, (b + 1) as f64 / n as f64);
                let count = self.count[b];
                let (mean_uncertainty, error_rate) = if count == 0 {
                    (None, None)
                } else {
                    let u = self.sum_u[b] as f64 / FIXED_ONE / count as f64;
                    (
                        Some(u.clamp(low, high)),
                        Some(self.sum_e[b] as f64 / count as f64),
                    )
                };
                BinStats {
                    low,
                    high,
                    mean_uncertainty,
                    error_rate,
                    count,
                }
            })
            .collect();
        ReliabilityTable {
            measure: self.measure,
            bins,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStats {
    pub low: f64,
    pub high: f64,
    /// `None` for empty bins.
    pub mean_uncertainty: Option<f64>,
    pub error_rate: Option<f64>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityTable {
    pub measure: Measure,
    pub bins: Vec<BinStats>,
}

impl ReliabilityTable {
    pub fn total_pixels(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Indices of non-empty bins, ascending.
    pub fn occupied(&self) -> impl Iterator<Item = usize> + '_ {
        self.bins
            .iter()
            .enumerate()
            .filter(|(_, b)| b.count > 0)
            .map(|(i, _)| i)
    }
}

/// Count-weighted mean gap between uncertainty and error rate; empty bins
/// have weight zero.
pub fn uce(table: &ReliabilityTable) -> Result<f64, CalibrationError> {
    let total = table.total_pixels();
    if total == 0 {
        return Err(CalibrationError::EmptyTable);
    }
    Ok(table
        .bins
        .iter()
        .filter_map(|b| {
            let (u, e) = (b.mean_uncertainty?, b.error_rate?);
            Some(b.count as f64 / total as f64 * (u - e).abs())
        })
        .sum())
}

pub const RELIABILITY_HEADER: &str = "bin_low,bin_high,mean_uncertainty,error_rate,count";

/// One row per bin; empty bins leave the two statistics fields blank.
pub fn reliability_csv(table: &ReliabilityTable) -> String {
    let mut out = format!("{RELIABILITY_HEADER}\n");
    let opt = |v: Option<f64>| v.map(sig17).unwrap_or_default();
    for b in &table.bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            sig17(b.low),
            sig17(b.high),
            opt(b.mean_uncertainty),
            opt(b.error_rate),
            b.count
        );
    }
    out
}

pub fn parse_reliability_csv(text: &str, measure: Measure) -> Result<ReliabilityTable, CalibrationError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RELIABILITY_HEADER => {}
        _ => {
            return Err(CalibrationError::Csv {
                line: 1,
                reason: "missing header".into(),
            })
        }
    }
    let mut bins = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| CalibrationError::Csv { line: i + 1, reason };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", fields.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("'{s}': {e}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        bins.push(BinStats {
            low: num(fields[0])?,
            high: num(fields[1])?,
            mean_uncertainty: opt(fields[2])?,
            error_rate: opt(fields[3])?,
            count: fields[4]
                .parse()
                .map_err(|e| bad(format!("'{}': {e}", fields[4])))?,
        });
    }
    if bins.len() < 2 {
        return Err(CalibrationError::TooFewBins(bins.len()));
    }
    Ok(ReliabilityTable { measure, bins })
}

/// One entry of `uce.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UceRecord {
    pub measure: Measure,
    pub bins: usize,
    pub uce: f64,
    pub total_pixels: u64,
}

impl UceRecord {
    pub fn from_table(table: &ReliabilityTable) -> Result<Self, CalibrationError> {
        Ok(Self {
            measure: table.measure,
            bins: table.bins.len(),
            uce: uce(table)?,
            total_pixels: table.total_pixels(),
        })
    }
}

fn accumulate_image(
    dir: &Path,
    gt: &LabelMask,
    num_classes: usize,
    bins: usize,
) -> Result<Vec<BinAccumulator>, CalibrationError> {
    let pred = LabelMask::load(dir.join("mask.npy"))?;
    let errors = error_map(&pred, gt)?;
    Measure::ALL
        .iter()
        .map(|&m| {
            let raw = UncertaintyMap::load(dir.join(format!("{}.npy", m.name())), m, num_classes)?;
            let mut acc = BinAccumulator::new(m, bins)?;
            acc.add(&raw.normalized(num_classes), &errors)?;
            Ok(acc)
        })
        .collect()
}

/// Dataset-level reliability tables (std, then entropy) for an inference
/// output directory scored against ground-truth masks.
pub fn calibrate_dir(
    infer_dir: &Path,
    gt_dir: &Path,
    bins: usize,
) -> Result<Vec<ReliabilityTable>, CalibrationError> {
    if bins < 2 {
        return Err(CalibrationError::TooFewBins(bins));
    }
    let index = InferenceIndex::load(infer_dir)?;
    let gts: BTreeMap<String, _> = discover_masks(gt_dir)?;
    let per_image = index
        .images
        .par_iter()
        .map(|name| {
            let gt_path = gts
                .get(name)
                .ok_or_else(|| CalibrationError::MissingGroundTruth(name.clone()))?;
            let gt = LabelMask::load(gt_path)?;
            accumulate_image(&infer_dir.join(name), &gt, index.num_classes, bins)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut totals = Measure::ALL
        .iter()
        .map(|&m| BinAccumulator::new(m, bins))
        .collect::<Result<Vec<_>, _>>()?;
    for accs in &per_image {
        for (t, a) in totals.iter_mut().zip(accs) {
            t.merge(a)?;
        }
    }
    Ok(totals.iter().map(BinAccumulator::table).collect())
}
