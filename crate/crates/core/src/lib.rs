//! Dense optical flow regression from pairs of sparse lidar scans: range-image
//! projection, flow formats, the three-block network, training, synthetic data and
//! KITTI-style evaluation.

mod error;
pub mod eval;
pub mod flow;
pub mod lidar;
pub mod network;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use lidarflow_tensor as tensor;
