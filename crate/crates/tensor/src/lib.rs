//! Tensor substrate for the lidar flow network: 4-D tensors, a reverse-mode
//! differentiation graph, convolution/resampling layers, the masked end-point
//! loss, He initialization and Adam.

pub mod conv;
mod error;
mod graph;
mod init;
mod optim;
mod real;
pub mod spatial;
mod tensor;

pub use conv::{ConvSpec, Padding};
pub use error::{Result, TensorError};
pub use graph::{Graph, Var, LEAKY_SLOPE};
pub use init::{fan_in, he_init};
pub use optim::{Adam, AdamState};
pub use real::Real;
pub use tensor::{Dims, Mask, Tensor};
