//! LiDAR BEV flattening, feature fusion and BEV offset noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{NoiseSpec, PointCloud};
use crate::error::{Error, Result};
use crate::local_align::BevGrid;
use crate::nn::{cbr, CbrBlock};
use crate::scene::SceneBox;
use crate::tensor::{Dims, FeatureMap};

/// Dense `(batch, channels, z, height, width)` voxel features.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 5],
    data: Vec<f32>,
}

impl VoxelGrid {
    pub fn zeros(dims: [usize; 5]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 5], data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::config(format!(
                "voxel data length {} does not match {dims:?}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 5] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn index(&self, b: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        let [_, ch, nz, h, w] = self.dims;
        (((b * ch + c) * nz + z) * h + y) * w + x
    }

    pub fn get(&self, b: usize, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(b, c, z, y, x)]
    }

    pub fn add(&mut self, b: usize, c: usize, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(b, c, z, y, x);
        self.data[i] += v;
    }
}

/// Height levels of the voxel columns: `levels` equal slabs of the grid's z range.
fn z_level(bev: &BevGrid, levels: usize, z: f64) -> Option<usize> {
    let (lo, hi) = (bev.z.start, bev.z.stop);
    if !(z >= lo && z < hi) {
        return None;
    }
    Some((((z - lo) / (hi - lo)) * levels as f64).floor().min(levels as f64 - 1.0) as usize)
}

/// Box occupancy sampled at voxel centers, one channel, batch 1.
pub fn rasterize_boxes(boxes: &[SceneBox], bev: &BevGrid, levels: usize) -> Result<VoxelGrid> {
    bev.validate()?;
    if levels == 0 {
        return Err(Error::config("voxel grid needs at least one z level"));
    }
    let (h, w) = bev.size();
    let mut grid = VoxelGrid::zeros([1, 1, levels, h, w]);
    let dz = (bev.z.stop - bev.z.start) / levels as f64;
    for z in 0..levels {
        let zc = bev.z.start + (z as f64 + 0.5) * dz;
        for y in 0..h {
            for x in 0..w {
                let (xc, yc) = bev.cell_center(y, x);
                let p = nalgebra::Vector3::new(xc, yc, zc);
                if boxes.iter().any(|b| b.surface_distance(&p) <= 0.0) {
                    grid.add(0, 0, z, y, x, 1.0);
                }
            }
        }
    }
    Ok(grid)
}

/// Point counts per voxel, one channel, batch 1.
pub fn rasterize_points(cloud: &PointCloud, bev: &BevGrid, levels: usize) -> Result<VoxelGrid> {
    bev.validate()?;
    if levels == 0 {
        return Err(Error::config("voxel grid needs at least one z level"));
    }
    let (h, w) = bev.size();
    let mut grid = VoxelGrid::zeros([1, 1, levels, h, w]);
    for p in &cloud.points {
        let (Some(cell), Some(z)) = (bev.cell_of(p.x, p.y, bev.z.start), z_level(bev, levels, p.z)) else {
            continue;
        };
        grid.add(0, 0, z, cell / w, cell % w, 1.0);
    }
    Ok(grid)
}

/// `F_B^L`: voxel features summed over the z axis.
pub fn flatten_lidar_bev(voxels: &VoxelGrid, bev: &BevGrid) -> Result<FeatureMap> {
    let [b, c, nz, h, w] = voxels.dims();
    if (h, w) != bev.size() {
        return Err(Error::config(format!(
            "voxel plane {h}x{w} differs from BEV grid {:?}",
            bev.size()
        )));
    }
    let plane = h * w;
    let mut out = vec![0f32; b * c * plane];
    for (bc, dst) in out.chunks_mut(plane).enumerate() {
        for z in 0..nz {
            let start = (bc * nz + z) * plane;
            for (o, v) in dst.iter_mut().zip(&voxels.data()[start..start + plane]) {
                *o += v;
            }
        }
    }
    FeatureMap::from_vec(Dims::new(b, c, h, w), out)
}

/// Concatenated LiDAR + camera BEV and the fused supervision target.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedBev {
    /// `F_B^MM`: LiDAR channels first, then camera channels.
    pub mm: FeatureMap,
    /// `F̂_B`.
    pub target: FeatureMap,
    pub lidar_channels: usize,
}

impl FusedBev {
    pub fn camera_channels(&self) -> usize {
        self.mm.dims().channels - self.lidar_channels
    }

    pub fn lidar(&self) -> Result<FeatureMap> {
        self.mm.slice_channels(0, self.lidar_channels)
    }

    pub fn camera(&self) -> Result<FeatureMap> {
        self.mm.slice_channels(self.lidar_channels, self.camera_channels())
    }
}

pub fn fuse_bev(f_l: &FeatureMap, f_c: &FeatureMap, fuse_block: &CbrBlock) -> Result<FusedBev> {
    let (l, c) = (f_l.dims(), f_c.dims());
    if l.batch != c.batch || l.spatial() != c.spatial() {
        return Err(Error::config(format!(
            "LiDAR BEV {:?} and camera BEV {:?} disagree",
            l.as_array(),
            c.as_array()
        )));
    }
    if fuse_block.out_ch != l.channels {
        return Err(Error::config(format!(
            "fuse block emits {} channels, LiDAR BEV has {}",
            fuse_block.out_ch, l.channels
        )));
    }
    let mm = FeatureMap::concat_channels(&[f_l, f_c])?;
    let target = cbr(&mm, fuse_block)?;
    Ok(FusedBev {
        mm,
        target,
        lidar_channels: l.channels,
    })
}

/// Integer translation of channels `[start, start + count)`:
/// `out(y, x) = in(y - sv, x - su)`, zero where the source falls outside.
pub fn shift_channels(map: &FeatureMap, start: usize, count: usize, su: i64, sv: i64) -> Result<FeatureMap> {
    let d = map.dims();
    if start + count > d.channels {
        return Err(Error::config("shifted channel range exceeds the map"));
    }
    let (h, w) = (d.height as i64, d.width as i64);
    let mut out = map.clone();
    for b in 0..d.batch {
        for c in start..start + count {
            let src = map.plane(b, c).to_vec();
            let dst = out.plane_mut(b, c);
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = (y - sv, x - su);
                    dst[(y * w + x) as usize] = if sy >= 0 && sy < h && sx >= 0 && sx < w {
                        src[(sy * w + sx) as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    Ok(out)
}

/// Draws a shift uniformly from `[-max, max]²` (u first) for the given seed.
pub fn draw_bev_shift(max: u32, seed: u64) -> (i64, i64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = max as i64;
    let su = rng.random_range(-m..=m);
    let sv = rng.random_range(-m..=m);
    (su, sv)
}

/// `F_N^MM`: the camera block of `F_B^MM` translated by a seeded integer shift.
/// Returns the noisy map and the shift `(s_u, s_v)`.
pub fn inject_bev_noise(fused: &FusedBev, noise: &NoiseSpec, seed: u64) -> Result<(FeatureMap, (i64, i64))> {
    let shift = draw_bev_shift(noise.bev_shift_max, seed);
    let noisy = shift_channels(&fused.mm, fused.lidar_channels, fused.camera_channels(), shift.0, shift.1)?;
    Ok((noisy, shift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_align::AxisRange;

    fn small_grid() -> BevGrid {
        BevGrid {
            x: AxisRange::new(-6.0, 6.0, 1.0),
            y: AxisRange::new(-6.0, 6.0, 1.0),
            z: AxisRange::new(-2.0, 2.0, 4.0),
            ..BevGrid::default()
        }
    }

    #[test]
    fn single_level_flatten_is_squeeze() {
        let data: Vec<f32> = (0..2 * 3 * 12 * 12).map(|i| i as f32).collect();
        let v = VoxelGrid::from_vec([2, 3, 1, 12, 12], data.clone()).unwrap();
        assert_eq!(flatten_lidar_bev(&v, &small_grid()).unwrap().data(), &data[..]);
    }

    #[test]
    fn box_occupancy_matches_footprint() {
        let bev = small_grid();
        let b = SceneBox {
            center: [1.0, -2.0, 0.0],
            size: [4.0, 2.0, 2.0],
            yaw: 0.3,
        };
        let vox = rasterize_boxes(std::slice::from_ref(&b), &bev, 4).unwrap();
        let flat = flatten_lidar_bev(&vox, &bev).unwrap();
        assert!((flat.sum() - vox.data().iter().map(|&v| v as f64).sum::<f64>()).abs() < 1e-9);
        for y in 0..12 {
            for x in 0..12 {
                let (xc, yc) = bev.cell_center(y, x);
                assert_eq!(flat.get(0, 0, y, x) > 0.0, b.footprint_contains(xc, yc), "cell ({x}, {y})");
            }
        }
    }

    #[test]
    fn points_land_in_their_cells() {
        let bev = small_grid();
        let cloud = PointCloud::new(vec![
            nalgebra::Vector3::new(0.5, 0.5, 0.0),
            nalgebra::Vector3::new(0.6, 0.2, 1.5),
            nalgebra::Vector3::new(0.5, 0.5, 3.0),
            nalgebra::Vector3::new(-5.5, 5.5, -1.0),
        ])
        .unwrap();
        let flat = flatten_lidar_bev(&rasterize_points(&cloud, &bev, 2).unwrap(), &bev).unwrap();
        assert_eq!(flat.get(0, 0, 6, 6), 2.0);
        assert_eq!(flat.get(0, 0, 11, 0), 1.0);
        assert_eq!(flat.sum(), 3.0);
    }

    #[test]
    fn zero_camera_target_depends_on_lidar_only() {
        let f_l = FeatureMap::from_fn(Dims::new(1, 2, 3, 3), |_, c, y, x| (c + y * x) as f32).unwrap();
        let zeros = FeatureMap::zeros(Dims::new(1, 3, 3, 3)).unwrap();
        let ones = FeatureMap::filled(Dims::new(1, 3, 3, 3), 1.0).unwrap();
        let mut block = CbrBlock::seeded(5, 2, 1, 1, 0, 1.0, 1).unwrap();
        let a = fuse_bev(&f_l, &zeros, &block).unwrap();
        assert_eq!(a.mm.dims().channels, 5);
        // silence the camera columns: the target must ignore camera content
        for o in 0..2 {
            for i in 2..5 {
                block.weights[o * 5 + i] = 0.0;
            }
        }
        let b = fuse_bev(&f_l, &ones, &block).unwrap();
        let c = fuse_bev(&f_l, &zeros, &block).unwrap();
        assert_eq!(b.target, c.target);
    }

    #[test]
    fn shift_moves_one_hot_and_keeps_lidar() {
        let mut mm = FeatureMap::zeros(Dims::new(1, 2, 8, 8)).unwrap();
        mm.set(0, 0, 4, 4, 7.0);
        mm.set(0, 1, 4, 4, 1.0);
        let out = shift_channels(&mm, 1, 1, 3, -2).unwrap();
        assert_eq!(out.get(0, 1, 2, 7), 1.0);
        assert_eq!(out.plane(0, 1).iter().sum::<f32>(), 1.0);
        assert_eq!(out.plane(0, 0), mm.plane(0, 0));
    }

    #[test]
    fn zero_noise_leaves_map_unchanged() {
        let f_l = FeatureMap::filled(Dims::new(1, 1, 4, 4), 1.0).unwrap();
        let f_c = FeatureMap::from_fn(Dims::new(1, 2, 4, 4), |_, c, y, x| (c * 16 + y * 4 + x) as f32).unwrap();
        let block = CbrBlock::seeded(3, 1, 1, 1, 0, 1.0, 2).unwrap();
        let fused = fuse_bev(&f_l, &f_c, &block).unwrap();
        let noise = NoiseSpec {
            bev_shift_max: 0,
            ..NoiseSpec::default()
        };
        let (noisy, shift) = inject_bev_noise(&fused, &noise, 11).unwrap();
        assert_eq!(shift, (0, 0));
        assert_eq!(noisy, fused.mm);
    }
}
