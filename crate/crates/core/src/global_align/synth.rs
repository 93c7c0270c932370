//! Synthetic BEV features and fixed fusion weights for recovery experiments.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::align::{optimize_offsets, AlignModel, OptimizeResult, OptimizerConfig};
use super::bev::{fuse_bev, inject_bev_noise, FusedBev};
use crate::camera::NoiseSpec;
use crate::error::{Error, Result};
use crate::nn::CbrBlock;
use crate::tensor::{Dims, FeatureMap};

/// Gaussian-blurred white noise, rescaled to zero mean and unit variance per plane.
pub fn smooth_features(dims: Dims, sigma: f64, seed: u64) -> Result<FeatureMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config("blur sigma must be finite and > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let (h, w) = dims.spatial();
    let mut data = Vec::with_capacity(dims.len());
    for _ in 0..dims.batch * dims.channels {
        // noise over a padded canvas so the blurred field has no edge fall-off
        let (ph, pw) = (h + 2 * radius as usize, w + 2 * radius as usize);
        let noise: Vec<f64> = (0..ph * pw).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut rows = vec![0f64; ph * w];
        for y in 0..ph {
            for x in 0..w {
                rows[y * w + x] = kernel.iter().enumerate().map(|(k, kv)| kv * noise[y * pw + x + k]).sum();
            }
        }
        let mut plane = vec![0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel.iter().enumerate().map(|(k, kv)| kv * rows[(y + k) * w + x]).sum();
            }
        }
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane.len() as f64;
        let std = var.sqrt().max(1e-12);
        data.extend(plane.iter().map(|v| ((v - mean) / std) as f32));
    }
    FeatureMap::from_vec(dims, data)
}


/// `rows x cols` matrix with orthonormal rows (or columns, when taller than wide).
pub fn orthogonal_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows.max(cols);
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    q.view((0, 0), (rows, cols)).into_owned()
}

/// 1x1 fusion block over `[lidar | camera]` inputs with orthogonal blocks,
/// `lidar_gain` and `camera_gain` scaling, and a constant bias.
pub fn fusion_block(lidar: usize, camera: usize, out: usize, lidar_gain: f64, camera_gain: f64, bias: f32, seed: u64) -> Result<CbrBlock> {
    let ql = orthogonal_matrix(out, lidar, seed);
    let qc = orthogonal_matrix(out, camera, seed.wrapping_add(1));
    let mut matrix = Vec::with_capacity(out * (lidar + camera));
    for o in 0..out {
        matrix.extend((0..lidar).map(|i| (lidar_gain * ql[(o, i)]) as f32));
        matrix.extend((0..camera).map(|i| (camera_gain * qc[(o, i)]) as f32));
    }
    CbrBlock::pointwise(matrix, out, lidar + camera, vec![bias; out])
}

/// A seeded shift-recovery experiment on synthetic smooth BEV features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    /// BEV side length in cells.
    pub grid: usize,
    pub lidar_channels: usize,
    pub camera_channels: usize,
    pub blur_sigma: f64,
    pub lidar_gain: f64,
    pub camera_gain: f64,
    pub bias: f32,
    /// Border cells excluded when averaging the recovered field.
    pub margin: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            grid: 48,
            lidar_channels: 8,
            camera_channels: 8,
            blur_sigma: 8.0,
            lidar_gain: 0.3,
            camera_gain: 1.0,
            bias: 4.0,
            margin: 8,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lidar_channels == 0 || self.camera_channels == 0 {
            return Err(Error::config("recovery needs LiDAR and camera channels"));
        }
        if self.grid <= 2 * self.margin {
            return Err(Error::config(format!(
                "grid {} leaves no interior with margin {}",
                self.grid, self.margin
            )));
        }
        if !(self.lidar_gain.is_finite() && self.camera_gain.is_finite() && self.bias.is_finite()) {
            return Err(Error::config("fusion gains and bias must be finite"));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Recovery {
    pub injected: (i64, i64),
    /// Interior mean of the optimized offsets; compensation of `injected` is `+injected`.
    pub recovered: (f64, f64),
    pub result: OptimizeResult,
}

/// Builds clean features for `seed`, fuses them into the target, shifts the
/// camera block by a seeded draw and recovers the shift by descent.
pub fn recover_shift(cfg: &RecoveryConfig, noise: &NoiseSpec, seed: u64) -> Result<Recovery> {
    recover(cfg, seed, |fused| inject_bev_noise(fused, noise, seed ^ 0xb3e5))
}

/// As [`recover_shift`] with a fixed shift `(s_u, s_v)`.
pub fn recover_fixed_shift(cfg: &RecoveryConfig, shift: (i64, i64), seed: u64) -> Result<Recovery> {
    recover(cfg, seed, |fused| {
        let noisy = super::bev::shift_channels(&fused.mm, fused.lidar_channels, fused.camera_channels(), shift.0, shift.1)?;
        Ok((noisy, shift))
    })
}

fn recover(cfg: &RecoveryConfig, seed: u64, inject: impl Fn(&FusedBev) -> Result<(FeatureMap, (i64, i64))>) -> Result<Recovery> {
    cfg.validate()?;
    let g = cfg.grid;
    let f_l = smooth_features(Dims::new(1, cfg.lidar_channels, g, g), cfg.blur_sigma, seed)?;
    let f_c = smooth_features(Dims::new(1, cfg.camera_channels, g, g), cfg.blur_sigma, seed.wrapping_add(0x5eed))?;
    let block = fusion_block(
        cfg.lidar_channels,
        cfg.camera_channels,
        cfg.lidar_channels,
        cfg.lidar_gain,
        cfg.camera_gain,
        cfg.bias,
        seed.wrapping_add(0xf05e),
    )?;
    let fused = fuse_bev(&f_l, &f_c, &block)?;
    let (noisy, injected) = inject(&fused)?;
    let model = AlignModel::camera_refuse(&noisy, fused.lidar_channels, block)?;
    let result = optimize_offsets(&model, &fused.target, &cfg.optimizer)?;
    let recovered = result.offsets.interior_mean(cfg.margin);
    Ok(Recovery {
        injected,
        recovered,
        result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_features_are_normalized_and_seeded() {
        let a = smooth_features(Dims::new(1, 2, 20, 30), 3.0, 1).unwrap();
        assert_eq!(a, smooth_features(Dims::new(1, 2, 20, 30), 3.0, 1).unwrap());
        let p = a.plane(0, 1);
        let mean: f64 = p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64;
        let var: f64 = p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / p.len() as f64;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn orthogonal_rows() {
        let q = orthogonal_matrix(3, 5, 4);
        let gram = &q * q.transpose();
        assert!((gram - DMatrix::identity(3, 3)).abs().max() < 1e-12);
    }
}
