//! Per-image and dataset-level metric reports (`metrics.json`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distance::{hd95_with, Hd95Mode};
use super::{check_shapes, dice, iou, pixel_accuracy, MetricsError};
use crate::gridmaps::LabelMask;

pub const METRICS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Classes averaged into `mdice`, `miou` and `mhd95`.
    pub classes: Vec<u8>,
    pub num_classes: usize,
    pub hd95_mode: Hd95Mode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            classes: vec![1, 2],
            num_classes: 3,
            hd95_mode: Hd95Mode::Pooled,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(MetricsError::InvalidConfig(format!(
                "class count must lie in [2, 256], got {}",
                self.num_classes
            )));
        }
        if self.classes.is_empty() {
            return Err(MetricsError::InvalidConfig("empty class subset".into()));
        }
        if let Some(c) = self.classes.iter().find(|&&c| usize::from(c) >= self.num_classes) {
            return Err(MetricsError::InvalidConfig(format!(
                "class {c} is not below class count {}",
                self.num_classes
            )));
        }
        let mut sorted = self.classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return Err(MetricsError::InvalidConfig("repeated class in subset".into()));
        }
        Ok(())
    }
}

/// Metrics of one class on one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub dice: f64,
    pub iou: f64,
    pub hd95: Option<f64>,
    pub recall: Option<f64>,
}

/// Per-class vectors are indexed by class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub mdice: f64,
    pub miou: f64,
    /// `None` when any subset class has no boundary in either mask.
    pub mhd95: Option<f64>,
    pub mpa: f64,
    pub overall_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub image_count: usize,
    pub num_classes: usize,
    pub classes: Vec<u8>,
    pub hd95_mode: Hd95Mode,
    /// Per-class means over images (defined values only for hd95, recall).
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub mdice: f64,
    pub miou: f64,
    pub mhd95: Option<f64>,
    pub mpa: f64,
    pub overall_accuracy: f64,
    pub hd95_excluded_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub per_image: Vec<ImageMetrics>,
    pub summary: MetricsSummary,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String, MetricsError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn class_metrics(
    pred: &LabelMask,
    gt: &LabelMask,
    class: u8,
    recall: Option<f64>,
    mode: Hd95Mode,
) -> Result<ClassMetrics, MetricsError> {
    Ok(ClassMetrics {
        dice: dice(pred, gt, class)?,
        iou: iou(pred, gt, class)?,
        hd95: hd95_with(pred, gt, class, mode)?,
        recall,
    })
}

pub fn image_metrics(
    name: &str,
    pred: &LabelMask,
    gt: &LabelMask,
    config: &EvalConfig,
) -> Result<ImageMetrics, MetricsError> {
    check_shapes(pred, gt)?;
    let acc = pixel_accuracy(pred, gt, config.num_classes)?;
    let per_class = (0..config.num_classes)
        .map(|c| class_metrics(pred, gt, c as u8, acc.recall[c], config.hd95_mode))
        .collect::<Result<Vec<_>, _>>()?;
    let subset = || config.classes.iter().map(|&c| &per_class[usize::from(c)]);
    let mhd95 = subset()
        .map(|m| m.hd95)
        .collect::<Option<Vec<f64>>>()
        .and_then(mean);
    Ok(ImageMetrics {
        name: name.to_string(),
        dice: per_class.iter().map(|m| m.dice).collect(),
        iou: per_class.iter().map(|m| m.iou).collect(),
        hd95: per_class.iter().map(|m| m.hd95).collect(),
        recall: acc.recall,
        mdice: mean(subset().map(|m| m.dice)).expect("subset is non-empty"),
        miou: mean(subset().map(|m| m.iou)).expect("subset is non-empty"),
        mhd95,
        mpa: acc.mpa,
        overall_accuracy: acc.overall,
    })
}

fn summarize(per_image: &[ImageMetrics], config: &EvalConfig) -> MetricsSummary {
    let c = config.num_classes;
    let per_class = |f: &dyn Fn(&ImageMetrics, usize) -> Option<f64>| -> Vec<Option<f64>> {
        (0..c)
            .map(|k| mean(per_image.iter().filter_map(|m| f(m, k))))
            .collect()
    };
    let dense = |v: Vec<Option<f64>>| v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect();
    let excluded = per_image.iter().filter(|m| m.mhd95.is_none()).count();
    MetricsSummary {
        image_count: per_image.len(),
        num_classes: c,
        classes: config.classes.clone(),
        hd95_mode: config.hd95_mode,
        dice: dense(per_class(&|m, k| Some(m.dice[k]))),
        iou: dense(per_class(&|m, k| Some(m.iou[k]))),
        hd95: per_class(&|m, k| m.hd95[k]),
        recall: per_class(&|m, k| m.recall[k]),
        mdice: mean(per_image.iter().map(|m| m.mdice)).unwrap_or(f64::NAN),
        miou: mean(per_image.iter().map(|m| m.miou)).unwrap_or(f64::NAN),
        mhd95: mean(per_image.iter().filter_map(|m| m.mhd95)),
        mpa: mean(per_image.iter().map(|m| m.mpa)).unwrap_or(f64::NAN),
        overall_accuracy: mean(per_image.iter().map(|m| m.overall_accuracy)).unwrap_or(f64::NAN),
        hd95_excluded_count: excluded,
    }
}

/// Evaluates named `(prediction, ground truth)` pairs. Images are scored in
/// parallel and reduced in the given order.
pub fn evaluate_masks(
    pairs: &[(String, LabelMask, LabelMask)],
    config: &EvalConfig,
) -> Result<MetricsReport, MetricsError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(MetricsError::NoMasks("input".into()));
    }
    let per_image = pairs
        .par_iter()
        .map(|(name, pred, gt)| image_metrics(name, pred, gt, config))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(&per_image, config);
    Ok(MetricsReport {
        format_version: METRICS_FORMAT_VERSION,
        per_image,
        summary,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Finds masks under `dir`, keyed by image name. Accepts a dataset
/// directory (`masks/<name>.npy`), inference output (`<name>/mask.npy`) or
/// a flat directory of `<name>.npy` files.
pub fn discover_masks(dir: &Path) -> Result<BTreeMap<String, PathBuf>, MetricsError> {
    let masks_dir = dir.join("masks");
    let root = if masks_dir.is_dir() { masks_dir } else { dir.to_path_buf() };
    let mut found = BTreeMap::new();
    for entry in fs::read_dir(&root).map_err(io_err(&root))? {
        let path = entry.map_err(io_err(&root))?.path();
        let candidate = if path.is_dir() {
            let inner = path.join("mask.npy");
            inner.is_file().then(|| (path.file_name(), inner))
        } else if path.extension().is_some_and(|e| e == "npy") {
            Some((path.file_stem(), path.clone()))
        } else {
            None
        };
        if let Some((Some(name), file)) = candidate {
            let name = name.to_string_lossy().into_owned();
            if found.insert(name.clone(), file).is_some() {
                return Err(MetricsError::DuplicateName(name));
            }
        }
    }
    if found.is_empty() {
        return Err(MetricsError::NoMasks(dir.display().to_string()));
    }
    Ok(found)
}

/// Scores every prediction under `pred_dir` against the same-named mask
/// under `gt_dir`. Ground-truth masks without a prediction are ignored.
pub fn evaluate(
    pred_dir: &Path,
    gt_dir: &Path,
    config: &EvalConfig,
) -> Result<MetricsReport, MetricsError> {
    let preds = discover_masks(pred_dir)?;
    let gts = discover_masks(gt_dir)?;
    let pairs = preds
        .into_iter()
        .map(|(name, path)| {
            let gt_path = gts
                .get(&name)
                .ok_or_else(|| MetricsError::MissingGroundTruth(name.clone()))?;
            Ok((name, LabelMask::load(path)?, LabelMask::load(gt_path)?))
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    evaluate_masks(&pairs, config)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;

    fn three_class(h: usize, w: usize, shift: usize) -> LabelMask {
        mask(h, w, |r, c| {
            if (2 + shift..6 + shift).contains(&r) && (2..6).contains(&c) {
                1
            } else if (9..12).contains(&r) && (8..12).contains(&c) {
                2
            } else {
                0
            }
        })
    }

    #[test]
    fn identical_sets_are_perfect() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            three_class(14, 14, i).save(dir.path().join(format!("{i:04}.npy"))).unwrap();
        }
        let r = evaluate(dir.path(), dir.path(), &EvalConfig::default()).unwrap();
        assert_eq!(r.summary.image_count, 3);
        assert_eq!(r.summary.mdice, 1.0);
        assert_eq!(r.summary.miou, 1.0);
        assert_eq!(r.summary.mpa, 1.0);
        assert_eq!(r.summary.mhd95, Some(0.0));
        assert_eq!(r.summary.hd95_excluded_count, 0);
    }

    #[test]
    fn half_overlap_report() {
        let a = square(10, 10, 2, 2, 4, 1);
        let b = square(10, 10, 4, 2, 4, 1);
        let cfg = EvalConfig {
            classes: vec![1],
            num_classes: 2,
            hd95_mode: Hd95Mode::Pooled,
        };
        let r = evaluate_masks(&[("x".into(), a.clone(), b.clone())], &cfg).unwrap();
        let m = &r.per_image[0];
        assert_eq!(m.dice[1], 0.5);
        assert_eq!(m.iou[1], 1.0 / 3.0);
        assert_eq!(m.mdice, 0.5);
        // gt class 1 has 16 pixels, 8 recovered; background 84, 76 recovered
        assert_eq!(m.recall, vec![Some(76.0 / 84.0), Some(0.5)]);
        assert_eq!(m.overall_accuracy, 84.0 / 100.0);
        assert_eq!(m.mhd95, hd95_with(&a, &b, 1, Hd95Mode::Pooled).unwrap());
    }

    #[test]
    fn class_subset_changes_mean() {
        let (p, g) = (three_class(14, 14, 1), three_class(14, 14, 0));
        let pairs = [("a".to_string(), p, g)];
        let fg = evaluate_masks(&pairs, &EvalConfig::default()).unwrap();
        let all = EvalConfig {
            classes: vec![0, 1, 2],
            ..EvalConfig::default()
        };
        let with_bg = evaluate_masks(&pairs, &all).unwrap();
        assert_ne!(fg.summary.mdice, with_bg.summary.mdice);
        assert_eq!(fg.summary.dice, with_bg.summary.dice);
    }

    #[test]
    fn undefined_hd95_is_excluded() {
        let gt = three_class(14, 14, 0);
        let no_class2 = mask(14, 14, |r, c| u8::from(gt.get(r, c) == 1));
        let pairs = [
            ("0".to_string(), gt.clone(), gt.clone()),
            ("1".to_string(), no_class2.clone(), no_class2),
        ];
        let r = evaluate_masks(&pairs, &EvalConfig::default()).unwrap();
        assert_eq!(r.per_image[1].mhd95, None);
        assert_eq!(r.summary.hd95_excluded_count, 1);
        assert_eq!(r.summary.mhd95, Some(0.0));
        let json = r.to_json().unwrap();
        for key in ["dice", "iou", "hd95", "recall", "mdice", "miou", "mhd95", "mpa", "hd95_excluded_count"] {
            assert!(json.contains(&format!("\"{key}\"")), "{key}");
        }
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn discovers_each_layout() {
        let m = three_class(14, 14, 0);
        let ds = tempfile::tempdir().unwrap();
        fs::create_dir(ds.path().join("masks")).unwrap();
        m.save(ds.path().join("masks/0007.npy")).unwrap();
        let inf = tempfile::tempdir().unwrap();
        fs::create_dir(inf.path().join("0007")).unwrap();
        m.save(inf.path().join("0007/mask.npy")).unwrap();
        fs::write(inf.path().join("inference.json"), "{}").unwrap();
        for dir in [ds.path(), inf.path()] {
            let found = discover_masks(dir).unwrap();
            assert_eq!(found.keys().collect::<Vec<_>>(), vec!["0007"]);
        }
        let r = evaluate(inf.path(), ds.path(), &EvalConfig::default()).unwrap();
        assert_eq!(r.summary.mdice, 1.0);
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let preds = tempfile::tempdir().unwrap();
        let gts = tempfile::tempdir().unwrap();
        let m = three_class(14, 14, 0);
        m.save(preds.path().join("a.npy")).unwrap();
        m.save(preds.path().join("b.npy")).unwrap();
        m.save(gts.path().join("a.npy")).unwrap();
        assert!(matches!(
            evaluate(preds.path(), gts.path(), &EvalConfig::default()),
            Err(MetricsError::MissingGroundTruth(n)) if n == "b"
        ));
    }

    #[test]
    fn rejects_bad_config() {
        let bad = EvalConfig {
            classes: vec![3],
            ..EvalConfig::default()
        };
        assert!(bad.validate().is_err());
        let dup = EvalConfig {
            classes: vec![1, 1],
            ..EvalConfig::default()
        };
        assert!(dup.validate().is_err());
    }
}
