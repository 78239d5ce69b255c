//! Segmentation metrics: Dice, IoU, pixel accuracy and HD95.

mod distance;
mod report;

use thiserror::Error;

pub use distance::{boundary, edt_squared, hd95, hd95_with, percentile_linear, DistanceMap, Hd95Mode};
pub use report::{
    discover_masks, evaluate, evaluate_masks, image_metrics, ClassMetrics, EvalConfig, ImageMetrics,
    MetricsReport, MetricsSummary, METRICS_FORMAT_VERSION,
};

use crate::gridmaps::{GridError, LabelMask};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("distance transform of a mask with no foreground")]
    EmptyForeground,
    #[error("no masks found in {0}")]
    NoMasks(String),
    #[error("prediction '{0}' has no ground-truth mask")]
    MissingGroundTruth(String),
    #[error("duplicate mask name '{0}'")]
    DuplicateName(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn check_shapes(pred: &LabelMask, gt: &LabelMask) -> Result<(), MetricsError> {
    if pred.same_shape(gt) {
        Ok(())
    } else {
        Err(MetricsError::ShapeMismatch(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )))
    }
}

/// `(|P ∩ G|, |P|, |G|)` for one class.
fn overlap(pred: &LabelMask, gt: &LabelMask, class: u8) -> (u64, u64, u64) {
    let mut counts = (0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == class, g == class);
        counts.0 += u64::from(p && g);
        counts.1 += u64::from(p);
        counts.2 += u64::from(g);
    }
    counts
}

/// `2|P ∩ G| / (|P| + |G|)`, or 1 when the class is absent from both.
pub fn dice(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64, MetricsError> {
    check_shapes(pred, gt)?;
    let (i, p, g) = overlap(pred, gt, class);
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    })
}

/// `|P ∩ G| / |P ∪ G|`, or 1 when the class is absent from both.
pub fn iou(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64, MetricsError> {
    check_shapes(pred, gt)?;
    let (i, p, g) = overlap(pred, gt, class);
    Ok(if p + g == 0 {
        1.0
    } else {
        i as f64 / (p + g - i) as f64
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelAccuracy {
    pub overall: f64,
    /// `None` for classes absent from the ground truth.
    pub recall: Vec<Option<f64>>,
    /// Mean of the defined recalls.
    pub mpa: f64,
}

pub fn pixel_accuracy(
    pred: &LabelMask,
    gt: &LabelMask,
    num_classes: usize,
) -> Result<PixelAccuracy, MetricsError> {
    check_shapes(pred, gt)?;
    pred.check_classes(num_classes)?;
    gt.check_classes(num_classes)?;
    let mut hits = vec![0u64; num_classes];
    let mut totals = vec![0u64; num_classes];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        totals[usize::from(g)] += 1;
        hits[usize::from(g)] += u64::from(p == g);
    }
    let correct: u64 = hits.iter().sum();
    let recall: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let defined: Vec<f64> = recall.iter().flatten().copied().collect();
    Ok(PixelAccuracy {
        overall: correct as f64 / gt.len() as f64,
        mpa: defined.iter().sum::<f64>() / defined.len() as f64,
        recall,
    })
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_and_disjoint() {
        let a = square(8, 8, 1, 1, 3, 1);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(iou(&a, &a, 1).unwrap(), 1.0);
        let b = square(8, 8, 5, 5, 3, 1);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        assert_eq!(iou(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn empty_conventions() {
        let a = square(6, 6, 0, 0, 2, 1);
        let zeros = mask(6, 6, |_, _| 0);
        assert_eq!(dice(&zeros, &zeros, 2).unwrap(), 1.0);
        assert_eq!(iou(&zeros, &zeros, 2).unwrap(), 1.0);
        assert_eq!(dice(&a, &zeros, 1).unwrap(), 0.0);
        assert_eq!(iou(&zeros, &a, 1).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap_squares() {
        // rows 2..6 vs rows 4..8 share a 2x4 strip
        let a = square(10, 10, 2, 2, 4, 1);
        let b = square(10, 10, 4, 2, 4, 1);
        let count = |f: &dyn Fn(u8, u8) -> bool| {
            a.data().iter().zip(b.data()).filter(|(&x, &y)| f(x, y)).count() as f64
        };
        let inter = count(&|x, y| x == 1 && y == 1);
        let union = count(&|x, y| x == 1 || y == 1);
        assert_eq!(inter, 8.0);
        assert_eq!(dice(&a, &b, 1).unwrap(), 2.0 * inter / 32.0);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(iou(&a, &b, 1).unwrap(), inter / union);
        assert_eq!(iou(&a, &b, 1).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn accuracy_constant_prediction() {
        let gt = mask(4, 4, |_, c| u8::from(c >= 2));
        let pred = mask(4, 4, |_, _| 0);
        let acc = pixel_accuracy(&pred, &gt, 3).unwrap();
        assert_eq!(acc.overall, 0.5);
        assert_eq!(acc.recall, vec![Some(1.0), Some(0.0), None]);
        assert_eq!(acc.mpa, 0.5);
        let same = pixel_accuracy(&gt, &gt, 3).unwrap();
        assert_eq!(same.overall, 1.0);
        assert_eq!(same.mpa, 1.0);
    }

    #[test]
    fn shape_mismatch() {
        let a = mask(4, 4, |_, _| 0);
        let b = mask(4, 5, |_, _| 0);
        assert!(matches!(dice(&a, &b, 0), Err(MetricsError::ShapeMismatch(_))));
        assert!(pixel_accuracy(&a, &b, 2).is_err());
    }

    fn arb_pair() -> impl Strategy<Value = (LabelMask, LabelMask)> {
        (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
            (
                prop::collection::vec(0u8..3, h * w),
                prop::collection::vec(0u8..3, h * w),
            )
                .prop_map(move |(a, b)| {
                    (LabelMask::new(h, w, a).unwrap(), LabelMask::new(h, w, b).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn dice_iou_identities((a, b) in arb_pair(), class in 0u8..3) {
            let d = dice(&a, &b, class).unwrap();
            let j = iou(&a, &b, class).unwrap();
            prop_assert_eq!(d, dice(&b, &a, class).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(j <= d);
            prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
        }

        #[test]
        fn accuracy_ignores_pixel_order((a, b) in arb_pair(), seed in any::<u64>()) {
            let n = a.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.rotate_left((seed as usize) % n);
            order.reverse();
            let permute = |m: &LabelMask| {
                LabelMask::new(1, n, order.iter().map(|&i| m.data()[i]).collect()).unwrap()
            };
            let x = pixel_accuracy(&a, &b, 3).unwrap();
            let y = pixel_accuracy(&permute(&a), &permute(&b), 3).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
