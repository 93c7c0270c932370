//! Neighbor-aware depth and the camera-to-BEV path.

pub mod depth;
pub mod eval;
pub mod frustum;
pub mod kdtree;
pub mod metrics;
pub mod neighbors;
pub mod sparse;

pub use eval::{project_scene, ProjectedScene};
pub use depth::{depth_context_product, depthnet, dual_transform, DepthNet, DualTransform, Widths};
pub use frustum::{bev_pool, bev_pool_rig, AxisRange, BevGrid, FrustumConfig, FrustumGrid};
pub use kdtree::{nearest_brute_force, KdTree};
pub use metrics::{depth_error_report, DepthErrorReport, PixelError};
pub use neighbors::{gather_neighbor_depth, knn_neighbors, NeighborTable};
pub use sparse::{build_sparse_depth, Pixel, SparseDepth};
