use rayon::prelude::*;
use serde::Serialize;

use super::kdtree::KdTree;
use super::sparse::{Pixel, SparseDepth};
use crate::error::{Error, Result};
use crate::tensor::{Dims, FeatureMap};

/// Neighbor graph over the occupied pixels of each camera.
///
/// `indices[b]` holds `N_P x k` entries (row-major) indexing `coords[b]` of the
/// [`SparseDepth`] the table was built from. `depth` is `D_K`, shaped
/// `(cameras, k, H, W)`: channel `j` at an occupied pixel is the depth of that
/// pixel's `j`-th neighbor, zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable {
    pub k: usize,
    pub indices: Vec<Vec<u32>>,
    pub depth: FeatureMap,
}

impl NeighborTable {
    /// Neighbor indices of occupied pixel `i` of camera `b`.
    pub fn row(&self, b: usize, i: usize) -> &[u32] {
        &self.indices[b][i * self.k..(i + 1) * self.k]
    }

    /// `M_K_Coords` for camera `b`: `N_P` rows of `k` pixel coordinates.
    pub fn neighbor_coords(&self, sparse: &SparseDepth, b: usize) -> Vec<Vec<Pixel>> {
        self.indices[b]
            .chunks(self.k)
            .map(|row| row.iter().map(|&j| sparse.coords[b][j as usize]).collect())
            .collect()
    }

    /// JSON dump of the per-camera neighbor coordinates, for inspection.
    pub fn to_json(&self, sparse: &SparseDepth) -> String {
        #[derive(Serialize)]
        struct Entry {
            pixel: Pixel,
            neighbors: Vec<Pixel>,
        }
        #[derive(Serialize)]
        struct Dump {
            k: usize,
            cameras: Vec<Vec<Entry>>,
        }
        let cameras = (0..sparse.cameras())
            .map(|b| {
                sparse.coords[b]
                    .iter()
                    .zip(self.neighbor_coords(sparse, b))
                    .map(|(&pixel, neighbors)| Entry { pixel, neighbors })
                    .collect()
            })
            .collect();
        serde_json::to_string(&Dump { k: self.k, cameras }).expect("neighbor table serializes")
    }
}

/// For each occupied pixel, its `k` nearest other occupied pixels.
///
/// When a camera has `N_P <= k`, rows are padded by repeating the farthest
/// neighbor found; a lone pixel is its own neighbor.
pub fn knn_neighbors(sparse: &SparseDepth, k: usize) -> Result<NeighborTable> {
    if k == 0 {
        return Err(Error::config("k_graph must be >= 1"));
    }
    let indices: Vec<Vec<u32>> = sparse
        .coords
        .iter()
        .map(|coords| {
            let points: Vec<[i64; 2]> = coords.iter().map(|&(u, v)| [u as i64, v as i64]).collect();
            let tree = KdTree::build(&points);
            let rows: Vec<Vec<u32>> = points
                .par_iter()
                .enumerate()
                .map(|(i, &p)| {
                    let mut row: Vec<u32> = tree.nearest(p, k, Some(i)).into_iter().map(|j| j as u32).collect();
                    let pad = row.last().copied().unwrap_or(i as u32);
                    row.resize(k, pad);
                    row
                })
                .collect();
            rows.concat()
        })
        .collect();
    let (h, w) = sparse.image_size();
    let mut table = NeighborTable {
        k,
        indices,
        depth: FeatureMap::zeros(Dims::new(sparse.cameras(), k, h, w))?,
    };
    table.depth = gather_neighbor_depth(sparse, &table)?;
    Ok(table)
}

/// Builds `D_K` by reading the sparse depth at every neighbor coordinate.
pub fn gather_neighbor_depth(sparse: &SparseDepth, table: &NeighborTable) -> Result<FeatureMap> {
    let (h, w) = sparse.image_size();
    if table.indices.len() != sparse.cameras() {
        return Err(Error::config("neighbor table camera count differs from sparse depth"));
    }
    let mut out = FeatureMap::zeros(Dims::new(sparse.cameras(), table.k, h, w))?;
    for b in 0..sparse.cameras() {
        let coords = &sparse.coords[b];
        if table.indices[b].len() != coords.len() * table.k {
            return Err(Error::config("neighbor table rows differ from occupied pixel count"));
        }
        for (i, &(u, v)) in coords.iter().enumerate() {
            for (j, &n) in table.row(b, i).iter().enumerate() {
                let (nu, nv) = coords[n as usize];
                let d = sparse.depth.get(b, 0, nv as usize, nu as usize);
                out.set(b, j, v as usize, u as usize, d);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{PixelProjection, Projected};
    use crate::local_align::sparse::build_sparse_depth;

    fn sparse_from(pixels: &[(u32, u32, f32)], size: (usize, usize)) -> SparseDepth {
        let proj = PixelProjection {
            points: pixels
                .iter()
                .map(|&(u, v, z)| Projected {
                    u: u as f64,
                    v: v as f64,
                    z_c: z as f64,
                    valid: true,
                })
                .collect(),
            image_size: size,
        };
        build_sparse_depth(&[proj], size).unwrap()
    }

    #[test]
    fn two_pixels_are_mutual_neighbors() {
        let s = sparse_from(&[(1, 1, 4.0), (5, 2, 6.0)], (4, 8));
        let t = knn_neighbors(&s, 1).unwrap();
        assert_eq!(t.neighbor_coords(&s, 0), vec![vec![(5, 2)], vec![(1, 1)]]);
        assert_eq!(t.depth.get(0, 0, 1, 1), 6.0);
        assert_eq!(t.depth.get(0, 0, 2, 5), 4.0);
    }

    #[test]
    fn rows_pad_with_farthest_neighbor() {
        let s = sparse_from(&[(0, 0, 1.0), (1, 0, 2.0), (4, 0, 3.0)], (2, 8));
        let t = knn_neighbors(&s, 4).unwrap();
        assert_eq!(t.neighbor_coords(&s, 0)[0], vec![(1, 0), (4, 0), (4, 0), (4, 0)]);
        let lone = sparse_from(&[(3, 1, 2.5)], (2, 8));
        let t = knn_neighbors(&lone, 2).unwrap();
        assert_eq!(t.neighbor_coords(&lone, 0)[0], vec![(3, 1), (3, 1)]);
    }

    #[test]
    fn empty_camera_gives_empty_table() {
        let s = sparse_from(&[], (2, 2));
        let t = knn_neighbors(&s, 8).unwrap();
        assert!(t.indices[0].is_empty());
        assert!(t.depth.data().iter().all(|&d| d == 0.0));
        assert!(knn_neighbors(&s, 0).is_err());
    }

    #[test]
    fn uniform_depth_gives_constant_neighbor_depth() {
        let pixels: Vec<(u32, u32, f32)> = (0..40).map(|i| ((i * 7) % 23, (i * 3) % 11, 12.5)).collect();
        let s = sparse_from(&pixels, (11, 23));
        let t = knn_neighbors(&s, 8).unwrap();
        for &(u, v) in &s.coords[0] {
            for j in 0..8 {
                assert_eq!(t.depth.get(0, j, v as usize, u as usize), 12.5);
            }
        }
    }

    #[test]
    fn json_dump_lists_every_pixel() {
        let s = sparse_from(&[(1, 1, 4.0), (5, 2, 6.0), (2, 3, 1.0)], (4, 8));
        let t = knn_neighbors(&s, 2).unwrap();
        let v: serde_json::Value = serde_json::from_str(&t.to_json(&s)).unwrap();
        assert_eq!(v["k"], 2);
        assert_eq!(v["cameras"][0].as_array().unwrap().len(), 3);
    }
}
