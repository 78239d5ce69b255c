//! Per-pixel linear-softmax classifier.

use std::path::Path;

use super::features::FeatureMap;
use super::TrainError;
use crate::gridmaps::{load_array, save_array, ArrayData, NpyArray, ProbabilityMap};

/// `C × d` weight matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    num_classes: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ModelWeights {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            num_classes,
            dim,
            data: vec![0.0; num_classes * dim],
        }
    }

    pub fn from_vec(num_classes: usize, dim: usize, data: Vec<f64>) -> Result<Self, TrainError> {
        if num_classes < 2 || dim == 0 || data.len() != num_classes * dim {
            return Err(TrainError::Shape(format!(
                "{}x{} weights need {} values, got {}",
                num_classes,
                dim,
                num_classes * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|w| !w.is_finite()) {
            return Err(TrainError::NonFiniteWeights { index: i });
        }
        Ok(Self {
            num_classes,
            dim,
            data,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.data[class * self.dim..(class + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|w| w.is_finite())
    }

    /// `self -= step * other`.
    pub fn sub_scaled(&mut self, step: f64, other: &ModelWeights) {
        for (w, g) in self.data.iter_mut().zip(&other.data) {
            *w -= step * g;
        }
    }

    pub fn add_assign(&mut self, other: &ModelWeights) {
        for (w, g) in self.data.iter_mut().zip(&other.data) {
            *w += g;
        }
    }

    pub fn to_array(&self) -> NpyArray {
        NpyArray::new(
            vec![self.num_classes, self.dim],
            ArrayData::F64(self.data.clone()),
        )
        .expect("shape matches data")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        Ok(save_array(path, &self.to_array())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let array = load_array(path)?;
        match (array.shape(), array.data()) {
            (&[c, d], ArrayData::F64(v)) => Self::from_vec(c, d, v.clone()),
            (shape, data) => Err(TrainError::Shape(format!(
                "expected f64 C x d weights, got {:?} with shape {:?}",
                data.dtype(),
                shape
            ))),
        }
    }

    fn logits_into(&self, features: &[f64], out: &mut [f64]) {
        for (k, z) in out.iter_mut().enumerate() {
            *z = self
                .row(k)
                .iter()
                .zip(features)
                .map(|(w, f)| w * f)
                .sum();
        }
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Raw softmax probabilities, `H·W·C` values.
pub(crate) fn forward_raw(weights: &ModelWeights, features: &FeatureMap) -> Vec<f64> {
    let c = weights.num_classes();
    let mut out = vec![0.0; features.num_pixels() * c];
    for (px, probs) in features.pixels().zip(out.chunks_exact_mut(c)) {
        weights.logits_into(px, probs);
        softmax_in_place(probs);
    }
    out
}

/// Per-pixel `softmax(W f)`.
pub fn forward(weights: &ModelWeights, features: &FeatureMap) -> Result<ProbabilityMap, TrainError> {
    if weights.dim() != features.dim() {
        return Err(TrainError::Shape(format!(
            "weights expect {} features, map has {}",
            weights.dim(),
            features.dim()
        )));
    }
    let data = forward_raw(weights, features);
    Ok(ProbabilityMap::new(
        features.height(),
        features.width(),
        weights.num_classes(),
        data,
    )?)
}
