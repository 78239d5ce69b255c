//! Per-pixel map types shared by every stage of the pipeline, plus their
//! on-disk representation.
//!
//! All maps are row-major. Probability maps are laid out `H × W × C` with the
//! class index varying fastest. Arithmetic is done in f64; f32 is only used
//! when a map is written to disk.

pub mod npy;
mod pgm;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use npy::{load_array, save_array, ArrayData, Dtype, NpyArray, NpyError};
pub use pgm::write_pgm;

/// Tolerance on the per-pixel probability sum.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Slack allowed on uncertainty upper bounds.
pub const UNCERTAINTY_TOL: f64 = 1e-9;

/// Population std of a quantity confined to [0, 1] never exceeds this.
pub const MAX_STD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum GridError {
    #[error(transparent)]
    Npy(#[from] NpyError),
    #[error("invalid dimensions: {0}")]
    Dimensions(String),
    #[error("invalid probability map: {0}")]
    Probability(Violation),
    #[error("label {label} at pixel {pixel} is not below class count {num_classes}")]
    LabelOutOfRange {
        pixel: usize,
        label: u8,
        num_classes: usize,
    },
    #[error("uncertainty value {value} at pixel {pixel} outside [0, {bound}]")]
    UncertaintyOutOfRange { pixel: usize, value: f64, bound: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// First offending pixel found while validating a probability map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    /// Row-major pixel index.
    pub pixel: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ViolationKind {
    /// A value is NaN or infinite.
    NonFinite { class: usize },
    /// A value lies outside [0, 1].
    Range { class: usize, value: f64 },
    /// The class probabilities do not sum to one within tolerance.
    Sum { sum: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            ViolationKind::NonFinite { class } => {
                write!(f, "pixel {} class {}: non-finite value", self.pixel, class)
            }
            ViolationKind::Range { class, value } => write!(
                f,
                "pixel {} class {}: value {} outside [0, 1]",
                self.pixel, class, value
            ),
            ViolationKind::Sum { sum } => write!(
                f,
                "pixel {}: probabilities sum to {} (tolerance {})",
                self.pixel, sum, PROB_SUM_TOL
            ),
        }
    }
}

/// Checks the probability-map invariants on raw `H × W × C` data.
///
/// Never panics on finite or non-finite input. Reports the lowest-index
/// violating pixel; within a pixel, range problems are reported before the
/// sum check.
pub fn validate_probability_map(num_classes: usize, data: &[f64]) -> Result<(), Violation> {
    if num_classes == 0 {
        return Ok(());
    }
    for (pixel, probs) in data.chunks(num_classes).enumerate() {
        for (class, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(Violation {
                    pixel,
                    kind: ViolationKind::NonFinite { class },
                });
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Violation {
                    pixel,
                    kind: ViolationKind::Range { class, value: p },
                });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Violation {
                pixel,
                kind: ViolationKind::Sum { sum },
            });
        }
    }
    Ok(())
}

/// Per-pixel class-probability field, `H × W × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(
        height: usize,
        width: usize,
        num_classes: usize,
        data: Vec<f64>,
    ) -> Result<Self, GridError> {
        if height == 0 || width == 0 || num_classes < 2 {
            return Err(GridError::Dimensions(format!(
                "probability map needs H, W >= 1 and C >= 2, got {height}x{width}x{num_classes}"
            )));
        }
        if data.len() != height * width * num_classes {
            return Err(GridError::Dimensions(format!(
                "{}x{}x{} map needs {} values, got {}",
                height,
                width,
                num_classes,
                height * width * num_classes,
                data.len()
            )));
        }
        validate_probability_map(num_classes, &data).map_err(GridError::Probability)?;
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    /// Builds a map from an `H × W × C` array file.
    pub fn from_array(array: &NpyArray) -> Result<Self, GridError> {
        match (array.shape(), array.dtype()) {
            (&[h, w, c], Dtype::F32 | Dtype::F64) => {
                Self::new(h, w, c, array.data().to_f64())
            }
            (shape, dtype) => Err(GridError::Dimensions(format!(
                "expected a float H x W x C array, got {dtype:?} with shape {shape:?}"
            ))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        Self::from_array(&load_array(path)?)
    }

    /// Writes the map as f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        let data = self.data.iter().map(|&x| x as f32).collect();
        let array = NpyArray::new(
            vec![self.height, self.width, self.num_classes],
            ArrayData::F32(data),
        )?;
        Ok(save_array(path, &array)?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Class probabilities at a row-major pixel index.
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.num_classes..(index + 1) * self.num_classes]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.num_classes)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.num_classes == other.num_classes
    }
}

/// Per-pixel class-index field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, GridError> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(GridError::Dimensions(format!(
                "{}x{} mask needs {} labels, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_array(array: &NpyArray) -> Result<Self, GridError> {
        match (array.shape(), array.data()) {
            (&[h, w], ArrayData::U8(v)) => Self::new(h, w, v.clone()),
            (shape, data) => Err(GridError::Dimensions(format!(
                "expected a u8 H x W mask, got {:?} with shape {:?}",
                data.dtype(),
                shape
            ))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        Self::from_array(&load_array(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        let array = NpyArray::new(
            vec![self.height, self.width],
            ArrayData::U8(self.data.clone()),
        )?;
        Ok(save_array(path, &array)?)
    }

    /// Checks every label against a class count.
    pub fn check_classes(&self, num_classes: usize) -> Result<(), GridError> {
        match self
            .data
            .iter()
            .position(|&l| usize::from(l) >= num_classes)
        {
            Some(pixel) => Err(GridError::LabelOutOfRange {
                pixel,
                label: self.data[pixel],
                num_classes,
            }),
            None => Ok(()),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Which uncertainty measure a map holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Std,
    Entropy,
}

impl Measure {
    pub const ALL: [Measure; 2] = [Measure::Std, Measure::Entropy];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Std => "std",
            Measure::Entropy => "entropy",
        }
    }

    /// Upper bound of the raw measure, also the normalization constant.
    pub fn raw_bound(self, num_classes: usize) -> f64 {
        match self {
            Measure::Std => MAX_STD,
            Measure::Entropy => (num_classes as f64).ln(),
        }
    }
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-pixel scalar uncertainty field.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    height: usize,
    width: usize,
    measure: Measure,
    normalized: bool,
    data: Vec<f64>,
}

impl UncertaintyMap {
    /// Validates values against `[0, bound]`, where the bound is 1 for
    /// normalized maps and the measure's raw maximum otherwise.
    pub fn new(
        height: usize,
        width: usize,
        measure: Measure,
        normalized: bool,
        num_classes: usize,
        data: Vec<f64>,
    ) -> Result<Self, GridError> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(GridError::Dimensions(format!(
                "{}x{} uncertainty map needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        let bound = if normalized {
            1.0
        } else {
            measure.raw_bound(num_classes)
        };
        if let Some(pixel) = data
            .iter()
            .position(|&u| !(u >= 0.0 && u <= bound + UNCERTAINTY_TOL))
        {
            return Err(GridError::UncertaintyOutOfRange {
                pixel,
                value: data[pixel],
                bound,
            });
        }
        Ok(Self {
            height,
            width,
            measure,
            normalized,
            data,
        })
    }

    /// Builds a raw map from values read back from an f32 file.
    ///
    /// f32 rounding can push a value a few ulps past the raw bound (ln 3 is
    /// not representable); such values are clamped to the bound. Anything
    /// further than `1e-6` outside is rejected.
    pub fn from_stored(
        height: usize,
        width: usize,
        measure: Measure,
        num_classes: usize,
        mut data: Vec<f64>,
    ) -> Result<Self, GridError> {
        let bound = measure.raw_bound(num_classes);
        for u in &mut data {
            if *u > bound && *u <= bound + 1e-6 {
                *u = bound;
            }
        }
        Self::new(height, width, measure, false, num_classes, data)
    }

    pub fn load(
        path: impl AsRef<Path>,
        measure: Measure,
        num_classes: usize,
    ) -> Result<Self, GridError> {
        let array = load_array(path)?;
        match array.shape() {
            &[h, w] if array.dtype() != Dtype::U8 => {
                Self::from_stored(h, w, measure, num_classes, array.data().to_f64())
            }
            shape => Err(GridError::Dimensions(format!(
                "expected a float H x W uncertainty map, got shape {shape:?}"
            ))),
        }
    }

    /// Writes the map as f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        let data = self.data.iter().map(|&x| x as f32).collect();
        let array = NpyArray::new(vec![self.height, self.width], ArrayData::F32(data))?;
        Ok(save_array(path, &array)?)
    }

    /// Divides a raw map by its measure's bound (0.5 for std, ln C for
    /// entropy). Already-normalized maps are returned unchanged.
    pub fn normalized(&self, num_classes: usize) -> UncertaintyMap {
        if self.normalized {
            return self.clone();
        }
        let bound = self.measure.raw_bound(num_classes);
        let data = self
            .data
            .iter()
            .map(|&u| if bound > 0.0 { u / bound } else { 0.0 })
            .collect();
        UncertaintyMap {
            height: self.height,
            width: self.width,
            measure: self.measure,
            normalized: true,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}
