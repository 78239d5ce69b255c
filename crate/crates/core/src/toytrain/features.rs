//! Hand-crafted per-pixel features.
//!
//! Channels: `[1, intensity, 3x3 mean, 3x3 std, gradient magnitude]`.
//! The 3x3 window and the central differences replicate edge pixels.

use super::synth::SyntheticImage;

pub const FEATURE_DIM: usize = 5;

/// `H × W × FEATURE_DIM` feature field, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * FEATURE_DIM..(index + 1) * FEATURE_DIM]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(FEATURE_DIM)
    }
}

pub fn extract_features(image: &SyntheticImage) -> FeatureMap {
    let (h, w) = (image.height(), image.width());
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        image.get(r, c)
    };
    let mut data = Vec::with_capacity(h * w * FEATURE_DIM);
    for row in 0..h as isize {
        for col in 0..w as isize {
            let mut window = [0.0; 9];
            for (k, (dr, dc)) in (-1..=1)
                .flat_map(|dr| (-1..=1).map(move |dc| (dr, dc)))
                .enumerate()
            {
                window[k] = at(row + dr, col + dc);
            }
            let mean = window.iter().sum::<f64>() / 9.0;
            let var = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            let gx = (at(row, col + 1) - at(row, col - 1)) / 2.0;
            let gy = (at(row + 1, col) - at(row - 1, col)) / 2.0;
            data.extend_from_slice(&[1.0, at(row, col), mean, var.sqrt(), gx.hypot(gy)]);
        }
    }
    FeatureMap {
        height: h,
        width: w,
        data,
    }
}
