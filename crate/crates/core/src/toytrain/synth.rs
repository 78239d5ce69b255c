//! Synthetic three-class segmentation data.
//!
//! Every image is a background field with elliptical blobs of class 1 and
//! class 2 painted on top (class 2 last, so it wins overlaps). Each region
//! gets one intensity level drawn from its class's normal distribution
//! truncated at two standard deviations, then per-pixel Gaussian noise is
//! added and the result clamped to [0, 1].
//!
//! Randomness comes from ChaCha8 seeded with the dataset seed. Image `k`
//! (global index across train, val and test) draws from stream `k` of that
//! generator, so images are independent of each other and of thread count.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::gridmaps::{ArrayData, LabelMask, NpyArray};

pub const NUM_CLASSES: usize = 3;
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Normal intensity distribution of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Inclusive range of class-1 blob counts per image.
    pub class1_blobs: (usize, usize),
    /// Inclusive range of class-2 blob counts per image.
    pub class2_blobs: (usize, usize),
    /// Range of ellipse semi-axes, pixels.
    pub blob_radius: (f64, f64),
    /// Background, class 1, class 2.
    pub appearance: [Appearance; NUM_CLASSES],
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_train: 40,
            n_val: 10,
            n_test: 10,
            class1_blobs: (2, 4),
            class2_blobs: (1, 3),
            blob_radius: (5.0, 12.0),
            appearance: [
                Appearance { mean: 0.10, std: 0.05 },
                Appearance { mean: 0.35, std: 0.08 },
                Appearance { mean: 0.70, std: 0.08 },
            ],
            noise_std: 0.05,
            seed: 42,
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.image_size < 4 {
            return bad("image_size must be >= 4");
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("split counts must be >= 1");
        }
        for (lo, hi) in [self.class1_blobs, self.class2_blobs] {
            if lo == 0 || lo > hi {
                return bad("blob count ranges must satisfy 1 <= min <= max");
            }
        }
        let (rlo, rhi) = self.blob_radius;
        if !(rlo >= 1.0 && rlo <= rhi && rhi.is_finite()) {
            return bad("blob_radius must satisfy 1 <= min <= max");
        }
        let a = &self.appearance;
        if !(a[0].mean < a[1].mean && a[1].mean < a[2].mean) {
            return bad("class intensity means must be strictly increasing");
        }
        if a.iter().any(|c| !(c.std >= 0.0 && c.std.is_finite())) {
            return bad("class intensity stds must be finite and non-negative");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

/// Grayscale image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SyntheticImage {
    /// Values are clamped into [0, 1].
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, TrainError> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(TrainError::Shape(format!(
                "{}x{} image needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn to_array(&self) -> NpyArray {
        let data = self.data.iter().map(|&v| v as f32).collect();
        NpyArray::new(vec![self.height, self.width], ArrayData::F32(data))
            .expect("shape matches data")
    }

    pub fn from_array(array: &NpyArray) -> Result<Self, TrainError> {
        match (array.shape(), array.data()) {
            (&[h, w], ArrayData::F32(_) | ArrayData::F64(_)) => {
                Self::new(h, w, array.data().to_f64())
            }
            (shape, _) => Err(TrainError::Shape(format!(
                "expected a float H x W image, got shape {shape:?}"
            ))),
        }
    }
}

/// One generated image, its labels, and the noise-free intensity field.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: SyntheticImage,
    pub mask: LabelMask,
    /// Region intensity levels before noise and clamping.
    pub clean: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (train, val, test)")),
        }
    }
}

/// Index ranges of the three splits over the global image numbering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    fn from_config(config: &SyntheticDatasetConfig) -> Self {
        let a = config.n_train;
        let b = a + config.n_val;
        Self {
            train: (0..a).collect(),
            val: (a..b).collect(),
            test: (b..config.total()).collect(),
        }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub num_classes: usize,
    pub config: SyntheticDatasetConfig,
    pub splits: Splits,
    /// SHA-256 over every image file then mask file, in index order.
    pub digest: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SyntheticDatasetConfig,
    pub splits: Splits,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &Sample)> {
        self.splits
            .get(split)
            .iter()
            .map(move |&i| (i, &self.samples[i]))
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, size: usize, radius: (f64, f64)) -> Self {
        let s = size as f64;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        Self {
            cy: rng.random_range(0.0..s),
            cx: rng.random_range(0.0..s),
            ry: rng.random_range(radius.0..=radius.1),
            rx: rng.random_range(radius.0..=radius.1),
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn contains(&self, row: usize, col: usize) -> bool {
        let dy = row as f64 + 0.5 - self.cy;
        let dx = col as f64 + 0.5 - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Draws from a normal truncated to `mean ± 2 std` by rejection.
fn truncated_level(rng: &mut ChaCha8Rng, a: Appearance) -> f64 {
    if a.std == 0.0 {
        return a.mean;
    }
    let dist = Normal::new(a.mean, a.std).expect("finite std");
    loop {
        let v = dist.sample(rng);
        if (v - a.mean).abs() <= 2.0 * a.std {
            return v;
        }
    }
}

/// Generates the image with global index `index`.
pub fn generate_sample(config: &SyntheticDatasetConfig, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let n = config.image_size;

    // region id per pixel: 0 is background, blobs are numbered from 1
    let (region, classes) = loop {
        let c1 = rng.random_range(config.class1_blobs.0..=config.class1_blobs.1);
        let c2 = rng.random_range(config.class2_blobs.0..=config.class2_blobs.1);
        let mut classes = vec![0u8];
        let mut region = vec![0usize; n * n];
        for class in std::iter::repeat_n(1u8, c1).chain(std::iter::repeat_n(2u8, c2)) {
            let e = Ellipse::random(&mut rng, n, config.blob_radius);
            classes.push(class);
            let id = classes.len() - 1;
            for row in 0..n {
                for col in 0..n {
                    if e.contains(row, col) {
                        region[row * n + col] = id;
                    }
                }
            }
        }
        let mut present = [false; NUM_CLASSES];
        for &r in &region {
            present[usize::from(classes[r])] = true;
        }
        if present.iter().all(|&p| p) {
            break (region, classes);
        }
    };

    let levels: Vec<f64> = classes
        .iter()
        .map(|&c| truncated_level(&mut rng, config.appearance[usize::from(c)]))
        .collect();
    let clean: Vec<f64> = region.iter().map(|&r| levels[r]).collect();
    let noise = Normal::new(0.0, config.noise_std).expect("finite noise std");
    let noisy: Vec<f64> = clean.iter().map(|&v| v + noise.sample(&mut rng)).collect();
    let labels = region.iter().map(|&r| classes[r]).collect();

    Sample {
        image: SyntheticImage::new(n, n, noisy).expect("square image"),
        mask: LabelMask::new(n, n, labels).expect("square mask"),
        clean,
    }
}

pub fn generate_dataset(config: &SyntheticDatasetConfig) -> Result<Dataset, TrainError> {
    config.validate()?;
    let samples = (0..config.total())
        .map(|i| generate_sample(config, i))
        .collect();
    Ok(Dataset {
        config: config.clone(),
        splits: Splits::from_config(config),
        samples,
    })
}

/// File stem shared by an image, its mask and its inference outputs.
pub fn sample_name(index: usize) -> String {
    format!("{index:04}")
}

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("images").join(sample_name(index) + ".npy")
}

pub fn mask_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("masks").join(sample_name(index) + ".npy")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `images/NNNN.npy`, `masks/NNNN.npy` and `dataset.json`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetIndex, TrainError> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut hasher = Sha256::new();
    for (i, sample) in dataset.samples.iter().enumerate() {
        let image_bytes = crate::gridmaps::npy::encode(&sample.image.to_array());
        let mask_array = NpyArray::new(
            vec![sample.mask.height(), sample.mask.width()],
            ArrayData::U8(sample.mask.data().to_vec()),
        )?;
        let mask_bytes = crate::gridmaps::npy::encode(&mask_array);
        hasher.update(&image_bytes);
        hasher.update(&mask_bytes);
        let ip = image_path(dir, i);
        fs::write(&ip, &image_bytes).map_err(io_err(&ip))?;
        let mp = mask_path(dir, i);
        fs::write(&mp, &mask_bytes).map_err(io_err(&mp))?;
    }
    let index = DatasetIndex {
        format_version: DATASET_FORMAT_VERSION,
        num_classes: NUM_CLASSES,
        config: dataset.config.clone(),
        splits: dataset.splits.clone(),
        digest: hex::encode(hasher.finalize()),
    };
    let path = dir.join("dataset.json");
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(index)
}

pub fn read_dataset_index(dir: &Path) -> Result<DatasetIndex, TrainError> {
    let path = dir.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a dataset directory, checking its digest against `dataset.json`.
pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<(SyntheticImage, LabelMask)>), TrainError> {
    let index = read_dataset_index(dir)?;
    let mut hasher = Sha256::new();
    let mut items = Vec::with_capacity(index.config.total());
    for i in 0..index.config.total() {
        let ip = image_path(dir, i);
        let image_bytes = fs::read(&ip).map_err(io_err(&ip))?;
        let mp = mask_path(dir, i);
        let mask_bytes = fs::read(&mp).map_err(io_err(&mp))?;
        hasher.update(&image_bytes);
        hasher.update(&mask_bytes);
        let image = SyntheticImage::from_array(&crate::gridmaps::npy::decode(&image_bytes)?)?;
        let mask = LabelMask::from_array(&crate::gridmaps::npy::decode(&mask_bytes)?)?;
        mask.check_classes(index.num_classes)?;
        items.push((image, mask));
    }
    let digest = hex::encode(hasher.finalize());
    if digest != index.digest {
        return Err(TrainError::DigestMismatch {
            expected: index.digest,
            found: digest,
        });
    }
    Ok((index, items))
}
