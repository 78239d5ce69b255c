//! Cross-entropy plus soft-Dice loss and its analytic gradient.
//!
//! For one image with `n` pixels, probabilities `p` and one-hot labels `g`:
//!
//! ```text
//! CE   = -(1/n) Σ_x ln p[y_x, x]
//! Dice = 1 - (1/C) Σ_c (2 Σ_x p_c g_c + s) / (Σ_x p_c + Σ_x g_c + s)
//! L    = λ_ce CE + λ_dice Dice
//! ```
//!
//! A batch objective is the sum of the per-image losses. Per-image gradient
//! contributions are reduced in ascending image order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::FeatureMap;
use super::model::{forward_raw, ModelWeights};
use super::TrainError;
use crate::gridmaps::{LabelMask, ProbabilityMap};

/// Smoothing term of the soft-Dice quotient.
pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, dice: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.ce >= 0.0 && self.dice >= 0.0 && self.ce.is_finite() && self.dice.is_finite() {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!(
                "loss weights must be finite and non-negative, got ce={} dice={}",
                self.ce, self.dice
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
}

impl LossBreakdown {
    fn combine(ce: f64, dice: f64, w: LossWeights) -> Self {
        Self {
            total: w.ce * ce + w.dice * dice,
            ce,
            dice,
        }
    }

    fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.ce += other.ce;
        self.dice += other.dice;
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.ce.is_finite() && self.dice.is_finite()
    }
}

/// Per-class sums feeding the soft-Dice quotient.
struct DiceSums {
    inter: Vec<f64>,
    pred: Vec<f64>,
    truth: Vec<f64>,
}

fn dice_sums(probs: &[f64], labels: &[u8], c: usize) -> DiceSums {
    let mut s = DiceSums {
        inter: vec![0.0; c],
        pred: vec![0.0; c],
        truth: vec![0.0; c],
    };
    for (px, &y) in probs.chunks_exact(c).zip(labels) {
        let y = usize::from(y);
        for (k, &p) in px.iter().enumerate() {
            s.pred[k] += p;
        }
        s.inter[y] += px[y];
        s.truth[y] += 1.0;
    }
    s
}

fn loss_raw(probs: &[f64], labels: &[u8], c: usize, w: LossWeights) -> LossBreakdown {
    let n = labels.len() as f64;
    let ce = -probs
        .chunks_exact(c)
        .zip(labels)
        .map(|(px, &y)| px[usize::from(y)].ln())
        .sum::<f64>()
        / n;
    let s = dice_sums(probs, labels, c);
    let mean_quotient = (0..c)
        .map(|k| (2.0 * s.inter[k] + DICE_SMOOTH) / (s.pred[k] + s.truth[k] + DICE_SMOOTH))
        .sum::<f64>()
        / c as f64;
    LossBreakdown::combine(ce, 1.0 - mean_quotient, w)
}

fn check_pair(height: usize, width: usize, gt: &LabelMask, c: usize) -> Result<(), TrainError> {
    if gt.height() != height || gt.width() != width {
        return Err(TrainError::Shape(format!(
            "ground truth is {}x{}, prediction {}x{}",
            gt.height(),
            gt.width(),
            height,
            width
        )));
    }
    Ok(gt.check_classes(c)?)
}

/// Loss of one probability map against its labels.
pub fn loss(
    prob: &ProbabilityMap,
    gt: &LabelMask,
    weights: LossWeights,
) -> Result<LossBreakdown, TrainError> {
    weights.validate()?;
    check_pair(prob.height(), prob.width(), gt, prob.num_classes())?;
    Ok(loss_raw(prob.data(), gt.data(), prob.num_classes(), weights))
}

fn check_batch(
    weights: &ModelWeights,
    features: &[FeatureMap],
    gts: &[LabelMask],
    lw: LossWeights,
) -> Result<(), TrainError> {
    lw.validate()?;
    if features.len() != gts.len() {
        return Err(TrainError::Shape(format!(
            "{} feature maps but {} label masks",
            features.len(),
            gts.len()
        )));
    }
    for (f, g) in features.iter().zip(gts) {
        if f.dim() != weights.dim() {
            return Err(TrainError::Shape(format!(
                "weights expect {} features, map has {}",
                weights.dim(),
                f.dim()
            )));
        }
        check_pair(f.height(), f.width(), g, weights.num_classes())?;
    }
    Ok(())
}

/// Summed loss over a batch of images.
pub fn batch_loss(
    weights: &ModelWeights,
    features: &[FeatureMap],
    gts: &[LabelMask],
    lw: LossWeights,
) -> Result<LossBreakdown, TrainError> {
    check_batch(weights, features, gts, lw)?;
    let c = weights.num_classes();
    let per_image: Vec<LossBreakdown> = features
        .par_iter()
        .zip(gts.par_iter())
        .map(|(f, g)| loss_raw(&forward_raw(weights, f), g.data(), c, lw))
        .collect();
    let mut total = LossBreakdown::default();
    per_image.iter().for_each(|l| total.accumulate(l));
    Ok(total)
}

fn image_gradient(
    weights: &ModelWeights,
    features: &FeatureMap,
    gt: &LabelMask,
    lw: LossWeights,
) -> (LossBreakdown, ModelWeights) {
    let c = weights.num_classes();
    let d = weights.dim();
    let probs = forward_raw(weights, features);
    let labels = gt.data();
    let loss = loss_raw(&probs, labels, c, lw);
    let n = labels.len() as f64;
    let sums = dice_sums(&probs, labels, c);
    let denom: Vec<f64> = (0..c)
        .map(|k| sums.pred[k] + sums.truth[k] + DICE_SMOOTH)
        .collect();
    let numer: Vec<f64> = (0..c).map(|k| 2.0 * sums.inter[k] + DICE_SMOOTH).collect();

    let mut grad = ModelWeights::zeros(c, d);
    let mut dice_dp = vec![0.0; c];
    let mut delta = vec![0.0; c];
    for ((px, &y), f) in probs.chunks_exact(c).zip(labels).zip(features.pixels()) {
        let y = usize::from(y);
        // dDice/dp_k at this pixel
        for k in 0..c {
            let g = if k == y { 1.0 } else { 0.0 };
            dice_dp[k] = -(2.0 * g * denom[k] - numer[k]) / (denom[k] * denom[k]) / c as f64;
        }
        let expected: f64 = px.iter().zip(&dice_dp).map(|(p, a)| p * a).sum();
        for k in 0..c {
            let onehot = if k == y { 1.0 } else { 0.0 };
            let ce = (px[k] - onehot) / n;
            let dice = px[k] * (dice_dp[k] - expected);
            delta[k] = lw.ce * ce + lw.dice * dice;
        }
        let g = grad.data_mut();
        for k in 0..c {
            for j in 0..d {
                g[k * d + j] += delta[k] * f[j];
            }
        }
    }
    (loss, grad)
}

/// Analytic gradient of the summed batch loss with respect to the weights.
pub fn gradient(
    weights: &ModelWeights,
    features: &[FeatureMap],
    gts: &[LabelMask],
    lw: LossWeights,
) -> Result<(LossBreakdown, ModelWeights), TrainError> {
    check_batch(weights, features, gts, lw)?;
    let per_image: Vec<(LossBreakdown, ModelWeights)> = features
        .par_iter()
        .zip(gts.par_iter())
        .map(|(f, g)| image_gradient(weights, f, g, lw))
        .collect();
    let mut loss = LossBreakdown::default();
    let mut grad = ModelWeights::zeros(weights.num_classes(), weights.dim());
    for (l, g) in &per_image {
        loss.accumulate(l);
        grad.add_assign(g);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toytrain::features::{extract_features, FEATURE_DIM};
    use crate::toytrain::model::forward;
    use crate::toytrain::synth::SyntheticImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, c: usize, data: Vec<f64>) -> ProbabilityMap {
        ProbabilityMap::new(h, w, c, data).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = LabelMask::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let mut data = vec![0.0; 12];
        for (i, &l) in gt.data().iter().enumerate() {
            data[i * 3 + usize::from(l)] = 1.0;
        }
        let l = loss(&map(2, 2, 3, data), &gt, LossWeights::default()).unwrap();
        assert_eq!(l.ce, 0.0);
        assert!(l.dice.abs() < 1e-6);
    }

    #[test]
    fn uniform_cross_entropy() {
        let gt = LabelMask::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let l = loss(&map(2, 3, 3, vec![1.0 / 3.0; 18]), &gt, LossWeights::default()).unwrap();
        assert!((l.ce - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_pixel_hand_value() {
        let gt = LabelMask::new(1, 1, vec![0]).unwrap();
        let l = loss(&map(1, 1, 3, vec![0.5, 0.25, 0.25]), &gt, LossWeights::default()).unwrap();
        let s = DICE_SMOOTH;
        let ce = 2f64.ln();
        let q0 = (2.0 * 0.5 + s) / (0.5 + 1.0 + s);
        let q1 = s / (0.25 + s);
        let dice = 1.0 - (q0 + 2.0 * q1) / 3.0;
        assert!((l.ce - ce).abs() < 1e-15);
        assert!((l.dice - dice).abs() < 1e-15);
        assert!((l.total - (ce + dice)).abs() < 1e-15);
    }

    #[test]
    fn decomposition_and_bounds() {
        let gt = LabelMask::new(1, 2, vec![0, 1]).unwrap();
        let p = map(1, 2, 2, vec![0.7, 0.3, 0.4, 0.6]);
        let lw = LossWeights { ce: 0.3, dice: 2.0 };
        let l = loss(&p, &gt, lw).unwrap();
        assert_eq!(l.total, 0.3 * l.ce + 2.0 * l.dice);
        assert!(l.ce >= 0.0 && (0.0..=1.0).contains(&l.dice));
    }

    #[test]
    fn shape_mismatch() {
        let gt = LabelMask::new(1, 2, vec![0, 1]).unwrap();
        let p = map(1, 1, 2, vec![0.5, 0.5]);
        assert!(matches!(loss(&p, &gt, LossWeights::default()), Err(TrainError::Shape(_))));
    }

    fn random_instance(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (FeatureMap, LabelMask) {
        let img: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let labels = (0..h * w).map(|_| rng.random_range(0..3u8)).collect();
        (
            extract_features(&SyntheticImage::new(h, w, img).unwrap()),
            LabelMask::new(h, w, labels).unwrap(),
        )
    }

    /// Loss via the public forward + loss path, independent of the
    /// gradient code.
    fn objective(w: &ModelWeights, f: &[FeatureMap], g: &[LabelMask], lw: LossWeights) -> f64 {
        f.iter()
            .zip(g)
            .map(|(f, g)| loss(&forward(w, f).unwrap(), g, lw).unwrap().total)
            .sum()
    }

    #[test]
    fn matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for lw in [
            LossWeights { ce: 1.0, dice: 0.0 },
            LossWeights { ce: 0.0, dice: 1.0 },
            LossWeights { ce: 1.0, dice: 1.0 },
        ] {
            let (f, g) = random_instance(&mut rng, 8, 8);
            let data = (0..3 * FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = ModelWeights::from_vec(3, FEATURE_DIM, data).unwrap();
            let (_, grad) = gradient(&w, std::slice::from_ref(&f), std::slice::from_ref(&g), lw).unwrap();
            let h = 1e-5;
            for i in 0..w.data().len() {
                let mut plus = w.clone();
                plus.data_mut()[i] += h;
                let mut minus = w.clone();
                minus.data_mut()[i] -= h;
                let fs = std::slice::from_ref(&f);
                let gs = std::slice::from_ref(&g);
                let numeric = (objective(&plus, fs, gs, lw) - objective(&minus, fs, gs, lw)) / (2.0 * h);
                let a = grad.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "entry {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn ce_gradient_vanishes_at_perfect_fit() {
        // one-hot predictions need unbounded logits, so use weights that
        // saturate the softmax on a constant image labelled class 0
        let f = extract_features(&SyntheticImage::new(3, 3, vec![0.5; 9]).unwrap());
        let g = LabelMask::new(3, 3, vec![0; 9]).unwrap();
        let mut data = vec![0.0; 3 * FEATURE_DIM];
        data[0] = 800.0;
        let w = ModelWeights::from_vec(3, FEATURE_DIM, data).unwrap();
        let (_, grad) = gradient(&w, &[f], &[g], LossWeights { ce: 1.0, dice: 0.0 }).unwrap();
        assert!(grad.data().iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn gradient_is_linear_in_loss_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f, g) = random_instance(&mut rng, 6, 6);
        let data = (0..3 * FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = ModelWeights::from_vec(3, FEATURE_DIM, data).unwrap();
        let base = LossWeights { ce: 1.0, dice: 1.0 };
        let scaled = LossWeights { ce: 2.5, dice: 2.5 };
        let (_, a) = gradient(&w, std::slice::from_ref(&f), std::slice::from_ref(&g), base).unwrap();
        let (_, b) = gradient(&w, &[f], &[g], scaled).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.5 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}
