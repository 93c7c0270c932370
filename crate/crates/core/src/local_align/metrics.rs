//! Per-pixel depth error of projected LiDAR depth against a clean render.

use serde::Serialize;

use super::neighbors::NeighborTable;
use super::sparse::SparseDepth;
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Errors at one occupied pixel with positive truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PixelError {
    pub camera: u32,
    pub u: u32,
    pub v: u32,
    pub e_self: f32,
    pub e_best: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthErrorReport {
    pub k: usize,
    pub pixels: usize,
    pub median_self: f64,
    pub mean_self: f64,
    pub median_best: f64,
    pub mean_best: f64,
    /// Fraction of pixels where some neighbor beats the pixel's own depth.
    pub improved_fraction: f64,
}

/// Per-pixel errors using the first `k` neighbors of every row.
pub fn pixel_errors(sparse: &SparseDepth, table: &NeighborTable, truth: &FeatureMap, k: usize) -> Result<Vec<PixelError>> {
    if k > table.k {
        return Err(Error::config(format!("k = {k} exceeds table width {}", table.k)));
    }
    let td = truth.dims();
    if td.channels != 1 || td.batch != sparse.cameras() || td.spatial() != sparse.image_size() {
        return Err(Error::config(format!(
            "truth {:?} does not match sparse depth",
            td.as_array()
        )));
    }
    let mut out = Vec::new();
    for b in 0..sparse.cameras() {
        for (i, &(u, v)) in sparse.coords[b].iter().enumerate() {
            let t = truth.get(b, 0, v as usize, u as usize);
            if !(t > 0.0) {
                continue;
            }
            let e_self = (sparse.values[b][i] - t).abs();
            let e_best = table.row(b, i)[..k]
                .iter()
                .map(|&j| (sparse.values[b][j as usize] - t).abs())
                .fold(e_self, f32::min);
            out.push(PixelError {
                camera: b as u32,
                u,
                v,
                e_self,
                e_best,
            });
        }
    }
    Ok(out)
}

/// Median of a sample; the mean of the two middle values for even length.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize(errors: &[PixelError], k: usize) -> DepthErrorReport {
    let s: Vec<f64> = errors.iter().map(|e| e.e_self as f64).collect();
    let b: Vec<f64> = errors.iter().map(|e| e.e_best as f64).collect();
    let n = errors.len();
    let mean = |x: &[f64]| if x.is_empty() { f64::NAN } else { x.iter().sum::<f64>() / x.len() as f64 };
    let improved = errors.iter().filter(|e| e.e_best < e.e_self).count();
    DepthErrorReport {
        k,
        pixels: n,
        median_self: median(&s),
        mean_self: mean(&s),
        median_best: median(&b),
        mean_best: mean(&b),
        improved_fraction: if n == 0 { f64::NAN } else { improved as f64 / n as f64 },
    }
}

/// Self and best-of-neighbors error statistics over the full table width.
pub fn depth_error_report(sparse: &SparseDepth, table: &NeighborTable, truth: &FeatureMap) -> Result<DepthErrorReport> {
    Ok(summarize(&pixel_errors(sparse, table, truth, table.k)?, table.k))
}
