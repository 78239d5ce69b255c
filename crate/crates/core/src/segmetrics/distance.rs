//! Exact squared Euclidean distance transform, class boundaries and HD95.

use serde::{Deserialize, Serialize};

use super::{check_shapes, MetricsError};
use crate::gridmaps::LabelMask;

/// Squared distances (pixel²) to the nearest foreground pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u64>,
}

impl DistanceMap {
    pub fn get(&self, row: usize, col: usize) -> u64 {
        self.data[row * self.width + col]
    }
}

/// 1-D lower envelope of parabolas `(q - v)² + f(v)` over the finite entries
/// of `f`. Writes the minimum at every `q` into `out`.
fn envelope_1d(f: &[Option<u64>], out: &mut [Option<u64>]) {
    let mut v: Vec<usize> = Vec::with_capacity(f.len());
    let mut z: Vec<f64> = Vec::with_capacity(f.len() + 1);
    let key = |q: usize, fq: u64| fq as f64 + (q * q) as f64;
    for (q, fq) in f.iter().enumerate() {
        let Some(fq) = *fq else { continue };
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let fl = f[last].expect("envelope holds finite entries");
            let s = (key(q, fq) - key(last, fl)) / (2.0 * (q - last) as f64);
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(None);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q.abs_diff(v[k]) as u64;
        *o = Some(d * d + f[v[k]].expect("envelope holds finite entries"));
    }
}

/// Exact squared EDT of a binary field (`true` = foreground), via separable
/// column then row lower-envelope passes.
pub fn edt_squared(
    height: usize,
    width: usize,
    foreground: &[bool],
) -> Result<DistanceMap, MetricsError> {
    if foreground.len() != height * width {
        return Err(MetricsError::ShapeMismatch(format!(
            "{}x{} field needs {} values, got {}",
            height,
            width,
            height * width,
            foreground.len()
        )));
    }
    if !foreground.iter().any(|&b| b) {
        return Err(MetricsError::EmptyForeground);
    }
    let mut cols: Vec<Option<u64>> = vec![None; height * width];
    let mut col_in = vec![None; height];
    let mut col_out = vec![None; height];
    for c in 0..width {
        for r in 0..height {
            col_in[r] = foreground[r * width + c].then_some(0);
        }
        envelope_1d(&col_in, &mut col_out);
        for r in 0..height {
            cols[r * width + c] = col_out[r];
        }
    }
    let mut data = Vec::with_capacity(height * width);
    let mut row_out = vec![None; width];
    for row in cols.chunks_exact(width) {
        envelope_1d(row, &mut row_out);
        data.extend(row_out.iter().map(|d| d.expect("some column has foreground")));
    }
    Ok(DistanceMap {
        height,
        width,
        data,
    })
}

/// Pixels of `class` with a 4-neighbour of another class or on the image
/// border, in row-major order.
pub fn boundary(mask: &LabelMask, class: u8) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) != class {
                continue;
            }
            let edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            if edge
                || mask.get(r - 1, c) != class
                || mask.get(r + 1, c) != class
                || mask.get(r, c - 1) != class
                || mask.get(r, c + 1) != class
            {
                out.push((r, c));
            }
        }
    }
    out
}

/// Linear interpolation between order statistics at index `q·(n−1)`.
/// `sorted` must be ascending and non-empty.
pub fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// How the two directed distance sets combine into one HD95 value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Hd95Mode {
    /// 95th percentile of both directions pooled together.
    #[default]
    Pooled,
    /// Larger of the two directed 95th percentiles.
    MaxOfDirected,
}

fn directed(from: &[(usize, usize)], to: &DistanceMap) -> Vec<u64> {
    from.iter().map(|&(r, c)| to.get(r, c)).collect()
}

fn p95(mut squared: Vec<u64>) -> f64 {
    squared.sort_unstable();
    let d: Vec<f64> = squared.iter().map(|&s| (s as f64).sqrt()).collect();
    percentile_linear(&d, 0.95)
}

pub fn hd95(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<Option<f64>, MetricsError> {
    hd95_with(pred, gt, class, Hd95Mode::Pooled)
}

/// 95th-percentile Hausdorff distance between the class boundaries, in
/// pixels. `None` if either boundary is empty.
pub fn hd95_with(
    pred: &LabelMask,
    gt: &LabelMask,
    class: u8,
    mode: Hd95Mode,
) -> Result<Option<f64>, MetricsError> {
    check_shapes(pred, gt)?;
    let (bp, bg) = (boundary(pred, class), boundary(gt, class));
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let (h, w) = (pred.height(), pred.width());
    let field = |pts: &[(usize, usize)]| {
        let mut f = vec![false; h * w];
        for &(r, c) in pts {
            f[r * w + c] = true;
        }
        edt_squared(h, w, &f)
    };
    let to_gt = directed(&bp, &field(&bg)?);
    let to_pred = directed(&bg, &field(&bp)?);
    Ok(Some(match mode {
        Hd95Mode::Pooled => p95([to_gt, to_pred].concat()),
        Hd95Mode::MaxOfDirected => p95(to_gt).max(p95(to_pred)),
    }))
}
