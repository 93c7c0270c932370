//! Scene-level LocalAlign evaluation: perturbed projection against clean truth.

use rayon::prelude::*;

use super::metrics::{pixel_errors, summarize, DepthErrorReport, PixelError};
use super::neighbors::knn_neighbors;
use super::sparse::{build_sparse_depth, SparseDepth};
use crate::camera::{perturb_extrinsics, project_points, CameraModel, NoiseSpec, PointCloud};
use crate::error::Result;
use crate::scene::Scene;
use crate::tensor::FeatureMap;

/// Sparse depth seen through perturbed extrinsics, plus clean truth at its pixels.
#[derive(Clone, Debug)]
pub struct ProjectedScene {
    pub sparse: SparseDepth,
    /// Clean ray-cast depth at every occupied pixel of `sparse`, zero elsewhere.
    pub truth: FeatureMap,
    pub cameras: Vec<CameraModel>,
}

/// Seed of camera `index` when perturbing a rig with `seed`.
pub fn camera_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

pub fn project_scene(scene: &Scene, cloud: &PointCloud, noise: &NoiseSpec, seed: u64) -> Result<ProjectedScene> {
    noise.validate()?;
    let clean = &scene.rig.cameras;
    let size = clean[0].image_size();
    let cameras = clean
        .iter()
        .enumerate()
        .map(|(i, cam)| perturb_extrinsics(cam, noise, camera_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let projections: Vec<_> = cameras.par_iter().map(|cam| project_points(cloud, cam)).collect();
    let sparse = build_sparse_depth(&projections, size)?;
    let mut truth = FeatureMap::zeros(sparse.depth.dims())?;
    for (b, cam) in clean.iter().enumerate() {
        let depths: Vec<f32> = sparse.coords[b]
            .par_iter()
            .map(|&(u, v)| scene.depth_at(cam, u as f64, v as f64) as f32)
            .collect();
        for (&(u, v), d) in sparse.coords[b].iter().zip(depths) {
            truth.set(b, 0, v as usize, u as usize, d);
        }
    }
    Ok(ProjectedScene { sparse, truth, cameras })
}

/// Per-pixel errors for each `k` of `ks`, computed from one table of width `max(ks)`
/// so smaller `k` use prefixes of the same neighbor rows.
pub fn sweep_errors(projected: &ProjectedScene, ks: &[usize]) -> Result<Vec<(usize, Vec<PixelError>)>> {
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let table = knn_neighbors(&projected.sparse, k_max)?;
    ks.iter()
        .map(|&k| Ok((k, pixel_errors(&projected.sparse, &table, &projected.truth, k)?)))
        .collect()
}

pub fn sweep_reports(projected: &ProjectedScene, ks: &[usize]) -> Result<Vec<DepthErrorReport>> {
    Ok(sweep_errors(projected, ks)?
        .into_iter()
        .map(|(k, e)| summarize(&e, k))
        .collect())
}
