//! Frustum lifting geometry and scatter-sum pooling into the BEV grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::tensor::{Dims, FeatureMap};

/// `[start, stop, step]` along one axis, meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisRange {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl AxisRange {
    pub const fn new(start: f64, stop: f64, step: f64) -> Self {
        Self { start, stop, step }
    }

    /// `floor((stop - start) / step)`, guarded against round-off just below an integer.
    pub fn count(&self) -> usize {
        ((self.stop - self.start) / self.step + 1e-9).floor() as usize
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.step > 0.0 && self.stop > self.start && self.start.is_finite() && self.stop.is_finite()) {
            return Err(Error::config(format!("{what} range {self:?} is empty or malformed")));
        }
        Ok(())
    }
}

/// Camera-side frustum layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrustumConfig {
    pub depth: AxisRange,
    /// Image size `(H, W)` fed to the camera branch.
    pub image: (usize, usize),
    /// Feature stride of the lifted plane.
    pub downsample: usize,
}

impl Default for FrustumConfig {
    fn default() -> Self {
        Self {
            depth: AxisRange::new(1.0, 60.0, 0.5),
            image: (256, 704),
            downsample: 8,
        }
    }
}

impl FrustumConfig {
    pub fn bins(&self) -> usize {
        self.depth.count()
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.image.0 / self.downsample, self.image.1 / self.downsample)
    }

    pub fn validate(&self) -> Result<()> {
        self.depth.validate("depth")?;
        if self.depth.start <= 0.0 {
            return Err(Error::config("frustum depth must start above 0"));
        }
        let (h, w) = self.image;
        if self.downsample == 0 || h % self.downsample != 0 || w % self.downsample != 0 {
            return Err(Error::config(format!(
                "image {h}x{w} is not divisible by downsample {}",
                self.downsample
            )));
        }
        if h / self.downsample < 2 || w / self.downsample < 2 {
            return Err(Error::config("feature plane must be at least 2x2"));
        }
        Ok(())
    }
}

/// Metric BEV grid. Rows follow y, columns follow x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevGrid {
    pub x: AxisRange,
    pub y: AxisRange,
    /// Height slab `[start, stop]`; its step is the slab thickness.
    pub z: AxisRange,
    /// LiDAR voxel size `[dx, dy, dz]`, kept with the grid for reference.
    pub voxel_size: [f64; 3],
    /// LiDAR point-cloud range `[x0, y0, z0, x1, y1, z1]`.
    pub point_range: [f64; 6],
}

impl Default for BevGrid {
    fn default() -> Self {
        Self {
            x: AxisRange::new(-54.0, 54.0, 0.3),
            y: AxisRange::new(-54.0, 54.0, 0.3),
            z: AxisRange::new(-10.0, 10.0, 20.0),
            voxel_size: [0.075, 0.075, 0.2],
            point_range: [-54.0, -54.0, -5.0, 54.0, 54.0, 3.0],
        }
    }
}

impl BevGrid {
    /// `(H_B, W_B)`.
    pub fn size(&self) -> (usize, usize) {
        (self.y.count(), self.x.count())
    }

    pub fn validate(&self) -> Result<()> {
        self.x.validate("bev x")?;
        self.y.validate("bev y")?;
        self.z.validate("bev z")
    }

    /// Flat `row * W_B + col` index of the cell holding `(x, y, z)`, if inside.
    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> Option<usize> {
        if !(z >= self.z.start && z < self.z.stop) {
            return None;
        }
        let (h, w) = self.size();
        let col = ((x - self.x.start) / self.x.step).floor();
        let row = ((y - self.y.start) / self.y.step).floor();
        if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
            return None;
        }
        Some(row as usize * w + col as usize)
    }

    /// Center `(x, y)` of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x.start + (col as f64 + 0.5) * self.x.step,
            self.y.start + (row as f64 + 0.5) * self.y.step,
        )
    }
}

/// Ego-frame (LiDAR-frame) 3-D location of every `(bin, y, x)` frustum cell
/// of one camera, with its BEV cell precomputed.
#[derive(Clone, Debug)]
pub struct FrustumGrid {
    bins: usize,
    height: usize,
    width: usize,
    points: Vec<[f32; 3]>,
}

impl FrustumGrid {
    /// Lifts the feature plane through `cam`, whose intrinsics describe the
    /// full-resolution image of `cfg.image`. Feature cell `(x, y)` sits at image
    /// pixel `(x * (W - 1) / (w - 1), y * (H - 1) / (h - 1))`.
    pub fn build(cam: &CameraModel, cfg: &FrustumConfig) -> Result<Self> {
        cfg.validate()?;
        let (ih, iw) = cfg.image;
        let (fh, fw) = cfg.feature_size();
        let bins = cfg.bins();
        let full = cam.with_scale(1.0, ih, iw)?;
        let mut points = Vec::with_capacity(bins * fh * fw);
        for d in 0..bins {
            let depth = cfg.depth.start + d as f64 * cfg.depth.step;
            for y in 0..fh {
                let v = y as f64 * (ih - 1) as f64 / (fh - 1) as f64;
                for x in 0..fw {
                    let u = x as f64 * (iw - 1) as f64 / (fw - 1) as f64;
                    let p = full.back_project(u, v, depth);
                    points.push([p.x as f32, p.y as f32, p.z as f32]);
                }
            }
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("frustum holds non-finite coordinates".into()));
        }
        Ok(Self {
            bins,
            height: fh,
            width: fw,
            points,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Ego-frame point of frustum cell `(bin, y, x)`.
    pub fn point(&self, bin: usize, y: usize, x: usize) -> [f32; 3] {
        self.points[(bin * self.height + y) * self.width + x]
    }

    /// BEV cell of every frustum cell in `(bin, y, x)` order.
    pub fn bev_cells(&self, bev: &BevGrid) -> Vec<Option<u32>> {
        self.points
            .iter()
            .map(|p| bev.cell_of(p[0] as f64, p[1] as f64, p[2] as f64).map(|c| c as u32))
            .collect()
    }
}

/// Pools a depth-weighted context feature (`channels = C_ctx * D`, context-major)
/// into the BEV grid: every frustum cell adds its `C_ctx` context values to the
/// BEV cell containing its 3-D point. Out-of-range cells are dropped.
///
/// Summation within a BEV cell runs in `(bin, y, x)` order.
pub fn bev_pool(f_dc: &FeatureMap, frustum: &FrustumGrid, bev: &BevGrid) -> Result<FeatureMap> {
    bev.validate()?;
    let d = f_dc.dims();
    let bins = frustum.bins();
    if (d.height, d.width) != frustum.feature_size() {
        return Err(Error::config(format!(
            "feature plane {}x{} differs from frustum {:?}",
            d.height,
            d.width,
            frustum.feature_size()
        )));
    }
    if d.channels % bins != 0 {
        return Err(Error::config(format!(
            "{} channels are not a multiple of {bins} depth bins",
            d.channels
        )));
    }
    let ctx = d.channels / bins;
    let cells = frustum.bev_cells(bev);
    let (bh, bw) = bev.size();
    let out_dims = Dims::new(d.batch, ctx, bh, bw);
    let mut out = vec![0f32; out_dims.len()];
    let plane = d.plane();
    out.par_chunks_mut(bh * bw).enumerate().for_each(|(idx, out_plane)| {
        let (b, c) = (idx / ctx, idx % ctx);
        for bin in 0..bins {
            let src = f_dc.plane(b, c * bins + bin);
            let cell_row = &cells[bin * plane..(bin + 1) * plane];
            for (value, cell) in src.iter().zip(cell_row) {
                if let Some(cell) = cell {
                    out_plane[*cell as usize] += value;
                }
            }
        }
    });
    FeatureMap::from_vec(out_dims, out)
}

/// Pools a multi-camera batch laid out `(sample * cameras + camera)` and sums
/// the cameras of each sample.
pub fn bev_pool_rig(f_dc: &FeatureMap, frusta: &[FrustumGrid], bev: &BevGrid) -> Result<FeatureMap> {
    let n = frusta.len();
    let d = f_dc.dims();
    if n == 0 || d.batch % n != 0 {
        return Err(Error::config(format!(
            "batch {} is not a multiple of {n} cameras",
            d.batch
        )));
    }
    let per_sample = d.channels * d.plane();
    let mut total: Option<FeatureMap> = None;
    for (cam, frustum) in frusta.iter().enumerate() {
        let mut data = Vec::with_capacity((d.batch / n) * per_sample);
        for s in 0..d.batch / n {
            let b = s * n + cam;
            data.extend_from_slice(&f_dc.data()[b * per_sample..(b + 1) * per_sample]);
        }
        let cam_maps = FeatureMap::from_vec(Dims::new(d.batch / n, d.channels, d.height, d.width), data)?;
        let pooled = bev_pool(&cam_maps, frustum, bev)?;
        total = Some(match total {
            None => pooled,
            Some(mut acc) => {
                for (a, p) in acc.data_mut().iter_mut().zip(pooled.data()) {
                    *a += p;
                }
                acc
            }
        });
    }
    Ok(total.expect("at least one camera"))
}
