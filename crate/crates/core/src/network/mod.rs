//! The three blocks: lidar flow, domain transformation with upscaling, and
//! iterative refinement.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use config::{width_schedule, DtStage, Geometry, NetworkConfig, ShapeReport};
pub use forward::{BoundParams, ForwardOutputs, ForwardVars, Network, NetworkInputs};
pub use params::{param_count, param_layout, NetworkParams, ParamKind, ParamSpec};
