//! BEV fusion, offset noise and offset-field alignment.

pub mod align;
pub mod bev;
pub mod synth;

pub use align::{
    mm_align_forward, offset_noise_schedule, optimize_offsets, AlignModel, IterRecord, NoiseMode, OptimizeResult,
    OptimizerConfig, StopReason,
};
pub use bev::{
    flatten_lidar_bev, fuse_bev, inject_bev_noise, rasterize_boxes, rasterize_points, shift_channels, FusedBev,
    VoxelGrid,
};
pub use synth::{recover_fixed_shift, recover_shift, Recovery, RecoveryConfig};
