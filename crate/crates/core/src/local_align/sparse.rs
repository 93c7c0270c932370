use std::collections::BTreeMap;

use crate::camera::PixelProjection;
use crate::error::{Error, Result};
use crate::tensor::{Dims, FeatureMap};

/// Integer pixel `(u, v)`.
pub type Pixel = (u32, u32);

/// Projected LiDAR depth for a batch of cameras.
///
/// `depth` is `(cameras, 1, H, W)` with zeros at empty pixels. For camera `b`,
/// `coords[b]` lists its occupied pixels sorted by `(v, u)` and `values[b]`
/// the depth stored at each.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepth {
    pub depth: FeatureMap,
    pub coords: Vec<Vec<Pixel>>,
    pub values: Vec<Vec<f32>>,
}

impl SparseDepth {
    pub fn cameras(&self) -> usize {
        self.coords.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.depth.dims().spatial()
    }

    pub fn occupied(&self) -> usize {
        self.coords.iter().map(Vec::len).sum()
    }
}

/// Scatters valid projections onto integer pixels, one camera per batch entry.
/// When several points land on one pixel the smallest depth wins.
pub fn build_sparse_depth(projections: &[PixelProjection], image_size: (usize, usize)) -> Result<SparseDepth> {
    if projections.is_empty() {
        return Err(Error::config("sparse depth needs at least one camera"));
    }
    let (h, w) = image_size;
    let mut depth = FeatureMap::zeros(Dims::new(projections.len(), 1, h, w))?;
    let mut coords = Vec::with_capacity(projections.len());
    let mut values = Vec::with_capacity(projections.len());
    for (b, proj) in projections.iter().enumerate() {
        if proj.image_size != image_size {
            return Err(Error::config(format!(
                "projection image size {:?} differs from {:?}",
                proj.image_size, image_size
            )));
        }
        // keyed by (v, u) so iteration order is the required coordinate order
        let mut nearest: BTreeMap<(u32, u32), f32> = BTreeMap::new();
        for p in proj.valid() {
            let (u, v) = p.pixel();
            let z = p.z_c as f32;
            nearest
                .entry((v as u32, u as u32))
                .and_modify(|d| *d = d.min(z))
                .or_insert(z);
        }
        let plane = depth.plane_mut(b, 0);
        let mut cam_coords = Vec::with_capacity(nearest.len());
        let mut cam_values = Vec::with_capacity(nearest.len());
        for ((v, u), z) in nearest {
            plane[v as usize * w + u as usize] = z;
            cam_coords.push((u, v));
            cam_values.push(z);
        }
        coords.push(cam_coords);
        values.push(cam_values);
    }
    Ok(SparseDepth { depth, coords, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Projected;

    fn proj(points: &[(f64, f64, f64, bool)]) -> PixelProjection {
        PixelProjection {
            points: points
                .iter()
                .map(|&(u, v, z_c, valid)| Projected { u, v, z_c, valid })
                .collect(),
            image_size: (4, 6),
        }
    }

    #[test]
    fn no_valid_points_gives_empty_map() {
        let s = build_sparse_depth(&[proj(&[(1.0, 1.0, 3.0, false)])], (4, 6)).unwrap();
        assert!(s.coords[0].is_empty());
        assert!(s.depth.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn collisions_keep_minimum_depth() {
        let s = build_sparse_depth(&[proj(&[(2.2, 1.1, 9.0, true), (1.6, 0.9, 7.0, true)])], (4, 6)).unwrap();
        assert_eq!(s.coords[0], vec![(2, 1)]);
        assert_eq!(s.values[0], vec![7.0]);
        assert_eq!(s.depth.get(0, 0, 1, 2), 7.0);
    }

    #[test]
    fn coords_are_sorted_by_row_then_column() {
        let s = build_sparse_depth(
            &[proj(&[(5.0, 0.0, 1.0, true), (0.0, 3.0, 2.0, true), (1.0, 0.0, 3.0, true), (3.0, 2.0, 4.0, true)])],
            (4, 6),
        )
        .unwrap();
        assert_eq!(s.coords[0], vec![(1, 0), (5, 0), (3, 2), (0, 3)]);
    }

    #[test]
    fn image_size_mismatch_is_rejected() {
        assert!(build_sparse_depth(&[proj(&[])], (5, 6)).is_err());
    }
}
