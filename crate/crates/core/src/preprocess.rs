//! Intensity normalization and anisotropic resampling.
//!
//! Images are interpolated in-plane with an interpolating cubic B-spline and
//! through-plane with nearest neighbor. Label maps are split into one-hot
//! channels, interpolated linearly in-plane (nearest through-plane) and
//! recombined by argmax.
//!
//! Voxel centers sit at `(i + 0.5) * spacing`, so output index `k` samples
//! the source at `(k + 0.5) * new / old - 0.5`. Samples outside the source
//! are clamped to the border.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Spacing, Volume, NUM_LABELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_spacing: Spacing,
    pub zscore_epsilon: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing: Spacing::TARGET,
            zscore_epsilon: 1e-8,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zscore_epsilon > 0.0 && self.zscore_epsilon.is_finite()) {
            return Err(Error::config("zscore_epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Order in which the image chain runs; recorded in run manifests.
pub const PREPROCESS_ORDER: [&str; 2] = ["resample", "zscore"];

/// Resamples onto the target spacing, then z-scores.
pub fn preprocess_image(image: &Volume, config: &PreprocessConfig) -> Result<Volume> {
    let resampled = resample_image(image, config.target_spacing)?;
    zscore(&resampled, config.zscore_epsilon)
}

/// `(x - mean) / max(std, epsilon)` with population statistics over all voxels.
/// A constant image maps to all zeros.
pub fn zscore(image: &Volume, epsilon: f64) -> Result<Volume> {
    if image.is_empty() {
        return Err(Error::Invalid("zscore of an empty image".into()));
    }
    let data = image.data();
    let first = data[0];
    if data.iter().all(|&v| v == first) {
        return Volume::filled(image.shape(), 0.0, image.spacing());
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let denom = var.sqrt().max(epsilon);
    image.map(|&v| ((v as f64 - mean) / denom) as f32)
}

/// Output voxel count along one axis: `round(n * old / new)`, at least 1.
pub fn resampled_len(n: usize, old: f64, new: f64) -> usize {
    ((n as f64 * old / new).round() as usize).max(1)
}

pub fn resampled_shape(shape: [usize; 3], from: Spacing, to: Spacing) -> [usize; 3] {
    let (f, t) = (from.as_array(), to.as_array());
    [
        resampled_len(shape[0], f[0], t[0]),
        resampled_len(shape[1], f[1], t[1]),
        resampled_len(shape[2], f[2], t[2]),
    ]
}

pub fn resample_image(image: &Volume, target: Spacing) -> Result<Volume> {
    let shape = resampled_shape(image.shape(), image.spacing(), target);
    resample_image_to(image, shape, target)
}

/// Resamples onto an explicit output grid.
pub fn resample_image_to(image: &Volume, out_shape: [usize; 3], out_spacing: Spacing) -> Result<Volume> {
    let [nz, ny, nx] = image.shape();
    let src = image.spacing();
    let identity = |a: usize, n: usize, old: f64, new: f64| out_shape[a] == n && old == new;
    let z_map = nearest_map(nz, out_shape[0], src.dz, out_spacing.dz);
    let same_y = identity(1, ny, src.dy, out_spacing.dy);
    let same_x = identity(2, nx, src.dx, out_spacing.dx);
    let (my, mx) = (out_shape[1], out_shape[2]);
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for &z in &z_map {
        let plane: Vec<f64> = image.slice(z).iter().map(|&v| v as f64).collect();
        let rows = if same_x {
            plane
        } else {
            resample_rows(&plane, ny, nx, mx, src.dx, out_spacing.dx, Interp::CubicSpline)
        };
        let cols = if same_y {
            rows
        } else {
            resample_cols(&rows, ny, mx, my, src.dy, out_spacing.dy, Interp::CubicSpline)
        };
        out.extend(cols.into_iter().map(|v| v as f32));
    }
    Volume::new(out_shape, out, out_spacing)
}

pub fn resample_label(labels: &LabelMap, target: Spacing) -> Result<LabelMap> {
    let shape = resampled_shape(labels.shape(), labels.spacing(), target);
    resample_label_to(labels, shape, target)
}

/// One-hot resampling onto an explicit output grid.
pub fn resample_label_to(labels: &LabelMap, out_shape: [usize; 3], out_spacing: Spacing) -> Result<LabelMap> {
    let [nz, ny, nx] = labels.shape();
    let src = labels.spacing();
    let z_map = nearest_map(nz, out_shape[0], src.dz, out_spacing.dz);
    let same_y = out_shape[1] == ny && src.dy == out_spacing.dy;
    let same_x = out_shape[2] == nx && src.dx == out_spacing.dx;
    let (my, mx) = (out_shape[1], out_shape[2]);
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for &z in &z_map {
        let slice = labels.slice(z);
        if same_x && same_y {
            out.extend_from_slice(slice);
            continue;
        }
        let mut best = vec![0u8; my * mx];
        let mut best_val = vec![f64::NEG_INFINITY; my * mx];
        for class in 0..NUM_LABELS as u8 {
            if !slice.contains(&class) {
                continue;
            }
            let channel: Vec<f64> = slice
                .iter()
                .map(|&l| if l == class { 1.0 } else { 0.0 })
                .collect();
            let rows = if same_x {
                channel
            } else {
                resample_rows(&channel, ny, nx, mx, src.dx, out_spacing.dx, Interp::Linear)
            };
            let cols = if same_y {
                rows
            } else {
                resample_cols(&rows, ny, mx, my, src.dy, out_spacing.dy, Interp::Linear)
            };
            // classes visited in ascending order, strict > keeps the lowest on ties
            for (i, &v) in cols.iter().enumerate() {
                if v > best_val[i] {
                    best_val[i] = v;
                    best[i] = class;
                }
            }
        }
        out.extend_from_slice(&best);
    }
    LabelMap::new(out_shape, out, out_spacing)
}

/// Source coordinate sampled by output index `k`.
#[inline]
fn source_coord(k: usize, old: f64, new: f64) -> f64 {
    (k as f64 + 0.5) * new / old - 0.5
}

fn nearest_map(n: usize, m: usize, old: f64, new: f64) -> Vec<usize> {
    if n == m && old == new {
        return (0..n).collect();
    }
    (0..m)
        .map(|k| {
            let c = (source_coord(k, old, new) + 0.5).floor();
            c.clamp(0.0, (n - 1) as f64) as usize
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Interp {
    Linear,
    CubicSpline,
}

/// Resamples each of `rows` lines of length `n` to length `m`.
fn resample_rows(plane: &[f64], rows: usize, n: usize, m: usize, old: f64, new: f64, interp: Interp) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * m);
    let mut line = vec![0.0; m];
    for r in 0..rows {
        resample_line(&plane[r * n..(r + 1) * n], &mut line, old, new, interp);
        out.extend_from_slice(&line);
    }
    out
}

/// Resamples along the column axis of a `n x width` plane to `m x width`.
fn resample_cols(plane: &[f64], n: usize, width: usize, m: usize, old: f64, new: f64, interp: Interp) -> Vec<f64> {
    let mut out = vec![0.0; m * width];
    let mut col = vec![0.0; n];
    let mut line = vec![0.0; m];
    for x in 0..width {
        for (y, c) in col.iter_mut().enumerate() {
            *c = plane[y * width + x];
        }
        resample_line(&col, &mut line, old, new, interp);
        for (k, &v) in line.iter().enumerate() {
            out[k * width + x] = v;
        }
    }
    out
}

fn resample_line(src: &[f64], dst: &mut [f64], old: f64, new: f64, interp: Interp) {
    let n = src.len();
    let last = (n - 1) as f64;
    match interp {
        Interp::Linear => {
            for (k, d) in dst.iter_mut().enumerate() {
                let c = source_coord(k, old, new).clamp(0.0, last);
                let i = (c.floor() as usize).min(n - 1);
                let t = c - i as f64;
                let j = (i + 1).min(n - 1);
                *d = (1.0 - t) * src[i] + t * src[j];
            }
        }
        Interp::CubicSpline => {
            let spline = CubicSpline::new(src);
            for (k, d) in dst.iter_mut().enumerate() {
                *d = spline.eval(source_coord(k, old, new).clamp(0.0, last));
            }
        }
    }
}

/// Interpolating cubic B-spline over samples extended by edge replication.
pub(crate) struct CubicSpline {
    coeffs: Vec<f64>,
}

/// Replicated border samples on each side; the mirror boundary of the
/// padded line then only perturbs the interior by |pole|^16 ~ 7e-10.
const SPLINE_PAD: usize = 16;

impl CubicSpline {
    pub(crate) fn new(samples: &[f64]) -> Self {
        let n = samples.len();
        let mut coeffs = Vec::with_capacity(n + 2 * SPLINE_PAD);
        coeffs.extend(std::iter::repeat(samples[0]).take(SPLINE_PAD));
        coeffs.extend_from_slice(samples);
        coeffs.extend(std::iter::repeat(samples[n - 1]).take(SPLINE_PAD));
        bspline_prefilter(&mut coeffs);
        CubicSpline { coeffs }
    }

    /// Value at source coordinate `x` in `[0, n - 1]`.
    pub(crate) fn eval(&self, x: f64) -> f64 {
        let p = x + SPLINE_PAD as f64;
        let i = p.floor();
        let t = p - i;
        let i = i as usize;
        let t2 = t * t;
        let t3 = t2 * t;
        let w0 = (1.0 - t).powi(3) / 6.0;
        let w1 = (4.0 - 6.0 * t2 + 3.0 * t3) / 6.0;
        let w2 = (1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3) / 6.0;
        let w3 = t3 / 6.0;
        let last = self.coeffs.len() - 1;
        let c = |k: usize| self.coeffs[k.min(last)];
        w0 * c(i - 1) + w1 * c(i) + w2 * c(i + 1) + w3 * c(i + 2)
    }
}

/// In-place conversion of samples to cubic B-spline coefficients with
/// mirror-symmetric boundaries (recursive causal/anticausal filtering).
fn bspline_prefilter(c: &mut [f64]) {
    let n = c.len();
    if n < 2 {
        return;
    }
    let z = 3f64.sqrt() - 2.0;
    for v in c.iter_mut() {
        *v *= 6.0;
    }
    // causal initialization, exact mirror sum
    let mut zn = z;
    let z2n = z.powi(2 * n as i32 - 2);
    let mut sum = c[0] + z.powi(n as i32 - 1) * c[n - 1];
    let mut zk = z.powi(2 * n as i32 - 3);
    for k in 1..n - 1 {
        sum += (zn + zk) * c[k];
        zn *= z;
        zk /= z;
    }
    c[0] = sum / (1.0 - z2n);
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = z / (z * z - 1.0) * (c[n - 1] + z * c[n - 2]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
}
