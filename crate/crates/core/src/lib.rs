//! Neighbor-aware depth, camera-to-BEV pooling and learnable-offset BEV
//! alignment for LiDAR-camera fusion, plus the synthetic scenes used to
//! measure them.

pub mod camera;
pub mod error;
pub mod global_align;
pub mod io;
pub mod local_align;
pub mod loss;
pub mod nn;
pub mod sample;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Dims, FeatureMap};
