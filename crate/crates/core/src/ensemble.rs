//! Ensemble inference over sampled checkpoints.
//!
//! Given members `P_1..P_N` the ensemble prediction is their pointwise mean,
//! the mask is its argmax (ties go to the lowest class index), the std map is
//! the per-class population standard deviation across members reduced to one
//! scalar per pixel, and the entropy map is the entropy of the mean in nats.
//!
//! Member values at each element are summed in sorted order, so every output
//! is bit-identical under any reordering of the members.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridmaps::{
    load_array, write_pgm, GridError, LabelMask, Measure, NpyArray, NpyError, ProbabilityMap,
    UncertaintyMap, MAX_STD,
};
use crate::toytrain::{
    extract_features, forward, ModelWeights, RunManifest, SyntheticImage, TrainError,
};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble has no members")]
    Empty,
    #[error("member shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint file missing: {0}")]
    MissingCheckpoint(String),
    #[error("invalid ensemble spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Npy(#[from] NpyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How per-class standard deviations collapse to one value per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StdReduction {
    /// Arithmetic mean over classes.
    #[default]
    ClassMean,
    /// Largest per-class std.
    ClassMax,
    /// Std of the class predicted by the ensemble mean.
    PredictedClass,
}

fn check_members(members: &[ProbabilityMap]) -> Result<&ProbabilityMap, EnsembleError> {
    let first = members.first().ok_or(EnsembleError::Empty)?;
    if let Some((i, m)) = members.iter().enumerate().find(|(_, m)| !m.same_shape(first)) {
        return Err(EnsembleError::ShapeMismatch(format!(
            "member {} is {}x{}x{}, member 0 is {}x{}x{}",
            i,
            m.height(),
            m.width(),
            m.num_classes(),
            first.height(),
            first.width(),
            first.num_classes()
        )));
    }
    Ok(first)
}

fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Per-element mean and population variance across members.
fn moments(members: &[ProbabilityMap]) -> (Vec<f64>, Vec<f64>) {
    let n = members.len() as f64;
    let len = members[0].data().len();
    let mut buf = vec![0.0; members.len()];
    let mut mean = Vec::with_capacity(len);
    let mut var = Vec::with_capacity(len);
    for e in 0..len {
        for (b, m) in buf.iter_mut().zip(members) {
            *b = m.data()[e];
        }
        let mu = sorted_sum(&mut buf) / n;
        if buf[0] == buf[buf.len() - 1] {
            // exact agreement: keep the shared value and zero spread
            mean.push(buf[0]);
            var.push(0.0);
            continue;
        }
        for (b, m) in buf.iter_mut().zip(members) {
            *b = (m.data()[e] - mu).powi(2);
        }
        mean.push(mu);
        var.push(sorted_sum(&mut buf) / n);
    }
    (mean, var)
}

/// Pointwise mean of the members.
pub fn ensemble_mean(members: &[ProbabilityMap]) -> Result<ProbabilityMap, EnsembleError> {
    let first = check_members(members)?;
    let (mean, _) = moments(members);
    Ok(ProbabilityMap::new(
        first.height(),
        first.width(),
        first.num_classes(),
        mean,
    )?)
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = k;
        }
    }
    best
}

/// Per-pixel argmax; ties go to the smallest class index.
pub fn predict_mask(mean: &ProbabilityMap) -> LabelMask {
    let labels = mean.pixels().map(|p| argmax(p) as u8).collect();
    LabelMask::new(mean.height(), mean.width(), labels).expect("map dimensions are valid")
}

fn reduce_std(mean: &[f64], var: &[f64], c: usize, reduction: StdReduction) -> Vec<f64> {
    mean.chunks_exact(c)
        .zip(var.chunks_exact(c))
        .map(|(mu, v)| {
            let std = v.iter().map(|x| x.sqrt());
            let s = match reduction {
                StdReduction::ClassMean => std.sum::<f64>() / c as f64,
                StdReduction::ClassMax => std.fold(0.0, f64::max),
                StdReduction::PredictedClass => v[argmax(mu)].sqrt(),
            };
            s.min(MAX_STD)
        })
        .collect()
}

/// Raw std map, per-class std averaged over classes.
pub fn std_map(members: &[ProbabilityMap]) -> Result<UncertaintyMap, EnsembleError> {
    std_map_with(members, StdReduction::ClassMean)
}

pub fn std_map_with(
    members: &[ProbabilityMap],
    reduction: StdReduction,
) -> Result<UncertaintyMap, EnsembleError> {
    let first = check_members(members)?;
    let (mean, var) = moments(members);
    let data = reduce_std(&mean, &var, first.num_classes(), reduction);
    Ok(UncertaintyMap::new(
        first.height(),
        first.width(),
        Measure::Std,
        false,
        first.num_classes(),
        data,
    )?)
}

/// Entropy of the mean distribution in nats, with `0 ln 0 = 0`.
///
/// Values are clamped into `[0, ln C]`; this only bites on inputs whose
/// pixel sums sit inside the validation tolerance but above 1.
pub fn entropy_map(mean: &ProbabilityMap) -> UncertaintyMap {
    let bound = (mean.num_classes() as f64).ln();
    let data = mean
        .pixels()
        .map(|p| {
            let h: f64 = p
                .iter()
                .map(|&q| if q > 0.0 { -q * q.ln() } else { 0.0 })
                .sum();
            h.clamp(0.0, bound)
        })
        .collect();
    UncertaintyMap::new(
        mean.height(),
        mean.width(),
        Measure::Entropy,
        false,
        mean.num_classes(),
        data,
    )
    .expect("entropy clamped into range")
}

/// Everything inference produces for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub mean: ProbabilityMap,
    pub mask: LabelMask,
    pub std_raw: UncertaintyMap,
    pub std_norm: UncertaintyMap,
    pub entropy_raw: UncertaintyMap,
    pub entropy_norm: UncertaintyMap,
    pub member_count: usize,
}

impl EnsembleOutput {
    pub fn from_members(
        members: &[ProbabilityMap],
        reduction: StdReduction,
    ) -> Result<Self, EnsembleError> {
        let first = check_members(members)?;
        let (h, w, c) = (first.height(), first.width(), first.num_classes());
        let (mean, var) = moments(members);
        let std_data = reduce_std(&mean, &var, c, reduction);
        let mean = ProbabilityMap::new(h, w, c, mean)?;
        let std_raw = UncertaintyMap::new(h, w, Measure::Std, false, c, std_data)?;
        let entropy_raw = entropy_map(&mean);
        Ok(Self {
            mask: predict_mask(&mean),
            std_norm: std_raw.normalized(c),
            entropy_norm: entropy_raw.normalized(c),
            std_raw,
            entropy_raw,
            mean,
            member_count: members.len(),
        })
    }

    pub fn uncertainty(&self, measure: Measure, normalized: bool) -> &UncertaintyMap {
        match (measure, normalized) {
            (Measure::Std, false) => &self.std_raw,
            (Measure::Std, true) => &self.std_norm,
            (Measure::Entropy, false) => &self.entropy_raw,
            (Measure::Entropy, true) => &self.entropy_norm,
        }
    }
}

/// Loads every checkpoint listed in a manifest.
pub fn load_checkpoints(
    manifest: &RunManifest,
    run_dir: &Path,
) -> Result<Vec<ModelWeights>, EnsembleError> {
    if manifest.checkpoints.is_empty() {
        return Err(EnsembleError::Empty);
    }
    (0..manifest.checkpoints.len())
        .map(|i| {
            let path = manifest.checkpoint_path(run_dir, i);
            if !path.is_file() {
                return Err(EnsembleError::MissingCheckpoint(path.display().to_string()));
            }
            let w = ModelWeights::load(&path)?;
            if w.num_classes() != manifest.num_classes || w.dim() != manifest.feature_dim {
                return Err(EnsembleError::ShapeMismatch(format!(
                    "{} is {}x{}, manifest declares {}x{}",
                    path.display(),
                    w.num_classes(),
                    w.dim(),
                    manifest.num_classes,
                    manifest.feature_dim
                )));
            }
            Ok(w)
        })
        .collect()
}

/// Runs every checkpoint over every image and assembles the ensemble
/// outputs, in image order.
pub fn run_inference(
    manifest: &RunManifest,
    run_dir: &Path,
    images: &[SyntheticImage],
    reduction: StdReduction,
) -> Result<Vec<EnsembleOutput>, EnsembleError> {
    let checkpoints = load_checkpoints(manifest, run_dir)?;
    infer_with_weights(&checkpoints, images, reduction)
}

pub fn infer_with_weights(
    checkpoints: &[ModelWeights],
    images: &[SyntheticImage],
    reduction: StdReduction,
) -> Result<Vec<EnsembleOutput>, EnsembleError> {
    images
        .par_iter()
        .map(|image| {
            let features = extract_features(image);
            let members = checkpoints
                .iter()
                .map(|w| forward(w, &features))
                .collect::<Result<Vec<_>, _>>()?;
            EnsembleOutput::from_members(&members, reduction)
        })
        .collect()
}

pub const ENSEMBLE_SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub id: String,
    /// Relative to the directory holding `ensemble.json`.
    pub path: String,
}

/// `ensemble.json`: externally produced member probability stacks.
///
/// Each member file is either `H × W × C` (one image) or `I × H × W × C`
/// (a stack of images). `gt` lists one u8 mask per image, or nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub format_version: u32,
    pub num_classes: usize,
    pub members: Vec<EnsembleMember>,
    #[serde(default)]
    pub gt: Vec<String>,
}

/// Member probability maps grouped per image, plus ground truth if given.
#[derive(Debug, Clone)]
pub struct ExternalEnsemble {
    pub spec: EnsembleSpec,
    /// `per_image[i][k]` is member `k` on image `i`.
    pub per_image: Vec<Vec<ProbabilityMap>>,
    pub gt: Vec<LabelMask>,
}

fn split_stack(array: &NpyArray) -> Result<Vec<ProbabilityMap>, EnsembleError> {
    match *array.shape() {
        [_, _, _] => Ok(vec![ProbabilityMap::from_array(array)?]),
        [n, h, w, c] => {
            let data = array.data().to_f64();
            let per = h * w * c;
            (0..n)
                .map(|i| {
                    ProbabilityMap::new(h, w, c, data[i * per..(i + 1) * per].to_vec())
                        .map_err(EnsembleError::from)
                })
                .collect()
        }
        ref shape => Err(EnsembleError::ShapeMismatch(format!(
            "member arrays must be H x W x C or I x H x W x C, got {shape:?}"
        ))),
    }
}

pub fn load_ensemble_spec(path: &Path) -> Result<ExternalEnsemble, EnsembleError> {
    let text = fs::read_to_string(path).map_err(|source| EnsembleError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let spec: EnsembleSpec = serde_json::from_str(&text)?;
    if spec.format_version != ENSEMBLE_SPEC_VERSION {
        return Err(EnsembleError::InvalidSpec(format!(
            "unsupported format_version {}",
            spec.format_version
        )));
    }
    if spec.members.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut by_member = Vec::with_capacity(spec.members.len());
    for m in &spec.members {
        let maps = split_stack(&load_array(base.join(&m.path))?)?;
        if maps.iter().any(|p| p.num_classes() != spec.num_classes) {
            return Err(EnsembleError::ShapeMismatch(format!(
                "member '{}' does not have {} classes",
                m.id, spec.num_classes
            )));
        }
        by_member.push(maps);
    }
    let images = by_member[0].len();
    if let Some(m) = by_member.iter().position(|maps| maps.len() != images) {
        return Err(EnsembleError::ShapeMismatch(format!(
            "member '{}' covers {} images, member '{}' covers {}",
            spec.members[m].id,
            by_member[m].len(),
            spec.members[0].id,
            images
        )));
    }
    let per_image: Vec<Vec<ProbabilityMap>> = (0..images)
        .map(|i| by_member.iter().map(|maps| maps[i].clone()).collect())
        .collect();
    for members in &per_image {
        check_members(members)?;
    }
    if !spec.gt.is_empty() && spec.gt.len() != images {
        return Err(EnsembleError::InvalidSpec(format!(
            "{} ground-truth masks for {} images",
            spec.gt.len(),
            images
        )));
    }
    let gt = spec
        .gt
        .iter()
        .zip(&per_image)
        .map(|(p, members)| {
            let mask = LabelMask::load(base.join(p))?;
            mask.check_classes(spec.num_classes)?;
            if mask.height() != members[0].height() || mask.width() != members[0].width() {
                return Err(EnsembleError::ShapeMismatch(format!(
                    "ground truth {p} does not match member shape"
                )));
            }
            Ok(mask)
        })
        .collect::<Result<Vec<_>, EnsembleError>>()?;
    Ok(ExternalEnsemble {
        spec,
        per_image,
        gt,
    })
}

pub const INFERENCE_FORMAT_VERSION: u32 = 1;
pub const INFERENCE_INDEX_FILE: &str = "inference.json";

/// `inference.json`, written next to the per-image output directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceIndex {
    pub format_version: u32,
    pub num_classes: usize,
    pub member_count: usize,
    pub std_reduction: StdReduction,
    pub images: Vec<String>,
}

impl InferenceIndex {
    pub fn load(dir: &Path) -> Result<Self, EnsembleError> {
        let path = dir.join(INFERENCE_INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|source| EnsembleError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), EnsembleError> {
        let path = dir.join(INFERENCE_INDEX_FILE);
        let json = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, json).map_err(|source| EnsembleError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Writes `mean.npy`, `mask.npy`, `std.npy`, `entropy.npy`, `std.pgm` and
/// `entropy.pgm` into `out_dir/name/`.
pub fn write_output(out_dir: &Path, name: &str, output: &EnsembleOutput) -> Result<PathBuf, EnsembleError> {
    let dir = out_dir.join(name);
    fs::create_dir_all(&dir).map_err(|source| EnsembleError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    output.mean.save(dir.join("mean.npy"))?;
    output.mask.save(dir.join("mask.npy"))?;
    output.std_raw.save(dir.join("std.npy"))?;
    output.entropy_raw.save(dir.join("entropy.npy"))?;
    write_pgm(dir.join("std.pgm"), &output.std_norm)?;
    write_pgm(dir.join("entropy.pgm"), &output.entropy_norm)?;
    Ok(dir)
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pm(c: usize, data: Vec<f64>) -> ProbabilityMap {
        ProbabilityMap::new(1, data.len() / c, c, data).unwrap()
    }

    #[test]
    fn single_member_is_identity() {
        let m = pm(3, vec![0.2, 0.7, 0.1, 0.5, 0.25, 0.25]);
        assert_eq!(ensemble_mean(std::slice::from_ref(&m)).unwrap(), m);
        assert!(std_map(&[m]).unwrap().data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn opposite_members() {
        let a = pm(2, vec![1.0, 0.0]);
        let b = pm(2, vec![0.0, 1.0]);
        let members = [a, b];
        assert_eq!(ensemble_mean(&members).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(std_map(&members).unwrap().data(), &[0.5]);
    }

    #[test]
    fn three_member_std() {
        let members = [
            pm(2, vec![0.2, 0.8]),
            pm(2, vec![0.5, 0.5]),
            pm(2, vec![0.8, 0.2]),
        ];
        // deviations (-0.3, 0, 0.3): variance 0.18 / 3 = 0.06
        let expected = 0.244_948_974_278_317_809_819_728_407_470_589_1;
        let s = std_map(&members).unwrap();
        assert!((s.data()[0] - expected).abs() < 1e-12);
        let max = std_map_with(&members, StdReduction::ClassMax).unwrap();
        assert!((max.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn agreeing_members_have_zero_spread() {
        let m = pm(3, vec![0.1, 0.7, 0.2, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let members = [m.clone(), m.clone(), m.clone()];
        let out = EnsembleOutput::from_members(&members, StdReduction::ClassMean).unwrap();
        assert_eq!(out.mean, m);
        assert!(out.std_raw.data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn argmax_and_ties() {
        let m = pm(3, vec![0.2, 0.7, 0.1, 0.4, 0.4, 0.2, 0.0, 0.0, 1.0]);
        assert_eq!(predict_mask(&m).data(), &[1, 0, 2]);
    }

    #[test]
    fn entropy_fixtures() {
        let m = pm(3, vec![1.0 / 3.0; 3]);
        assert!((entropy_map(&m).data()[0] - 1.098_612_288_668_109_691_395).abs() < 1e-12);
        assert_eq!(entropy_map(&pm(3, vec![0.0, 1.0, 0.0])).data()[0], 0.0);
        let h = entropy_map(&pm(3, vec![0.5, 0.25, 0.25])).data()[0];
        assert!((h - 1.039_720_770_839_917_964_125_848).abs() < 1e-12);
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(matches!(ensemble_mean(&[]), Err(EnsembleError::Empty)));
        let a = pm(2, vec![0.5, 0.5]);
        let b = pm(2, vec![0.5, 0.5, 0.5, 0.5]);
        assert!(matches!(
            ensemble_mean(&[a, b]),
            Err(EnsembleError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn normalized_maps_divide_by_bounds() {
        let members = [pm(3, vec![0.6, 0.3, 0.1]), pm(3, vec![0.1, 0.3, 0.6])];
        let out = EnsembleOutput::from_members(&members, StdReduction::ClassMean).unwrap();
        assert_eq!(out.member_count, 2);
        assert_eq!(out.std_norm.data()[0], out.std_raw.data()[0] / 0.5);
        assert_eq!(out.entropy_norm.data()[0], out.entropy_raw.data()[0] / 3f64.ln());
    }

    fn arb_members() -> impl Strategy<Value = Vec<ProbabilityMap>> {
        (1usize..6, 2usize..5, 1usize..8).prop_flat_map(|(n, c, px)| {
            prop::collection::vec(prop::collection::vec(0.001f64..1.0, c * px), n).prop_map(
                move |raw| {
                    raw.into_iter()
                        .map(|v| {
                            let mut data = Vec::with_capacity(v.len());
                            for p in v.chunks(c) {
                                let s: f64 = p.iter().sum();
                                data.extend(p.iter().map(|x| x / s));
                            }
                            ProbabilityMap::new(1, px, c, data).unwrap()
                        })
                        .collect()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant(members in arb_members(), seed in any::<u64>()) {
            let a = EnsembleOutput::from_members(&members, StdReduction::ClassMean).unwrap();
            let mut shuffled = members.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let b = EnsembleOutput::from_members(&shuffled, StdReduction::ClassMean).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn bounds_hold(members in arb_members()) {
            let out = EnsembleOutput::from_members(&members, StdReduction::ClassMean).unwrap();
            let c = members[0].num_classes() as f64;
            prop_assert!(out.entropy_raw.data().iter().all(|&h| (0.0..=c.ln()).contains(&h)));
            prop_assert!(out.std_raw.data().iter().all(|&s| (0.0..=0.5).contains(&s)));
            for p in out.mean.pixels() {
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn argmax_invariant_to_monotone_rescaling(members in arb_members()) {
            let mean = ensemble_mean(&members).unwrap();
            let c = mean.num_classes();
            // p -> p^2 / Σ p^2 is strictly monotone within a pixel
            let mut data = Vec::new();
            for p in mean.pixels() {
                let s: f64 = p.iter().map(|x| x * x).sum();
                data.extend(p.iter().map(|x| x * x / s));
            }
            let rescaled = ProbabilityMap::new(1, mean.num_pixels(), c, data).unwrap();
            prop_assert_eq!(predict_mask(&mean), predict_mask(&rescaled));
        }
    }
}
