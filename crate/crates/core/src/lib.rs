//! Geometry and attention kernels for multi-frame equirectangular panorama
//! generation: spherical projection, epipolar masks between panoramas,
//! triplane feature sampling, ray-based pixel attention and sparse
//! interframe attention.

#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod camera;
pub mod epipolar;
pub mod error;
pub mod grid;
pub mod ray;
pub mod sequence;
pub mod triplane;

pub use attention::{AttentionParams, AttentionStats, CandidateLists, CostReport};
pub use camera::{EquirectGrid, Pose4DoF, PoseSE3, RayDir};
pub use epipolar::{EpipolarMask, EssentialMatrix, MaskConfig, PairMasks};
pub use error::{Error, Result};
pub use grid::FeatureGrid;
pub use ray::{RayAttentionParams, RaySampleConfig};
pub use sequence::{Schedule, Trajectory};
pub use triplane::{Triplane, TriplaneConfig};
