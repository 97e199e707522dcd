use thiserror::Error;

/// Failures raised by tensor construction, graph operations and optimizers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("geometry error in {op}: {axis} axis would have size {size}")]
    Geometry {
        op: &'static str,
        axis: &'static str,
        size: i64,
    },

    #[error("{op}: mask selects no valid pixels")]
    EmptyMask { op: &'static str },

    #[error("backward already ran on this graph")]
    Reentrant,

    #[error("backward requires a scalar loss, got {0} elements")]
    NotScalar(usize),

    #[error("zero fan-in for shape {0:?}")]
    ZeroFanIn([usize; 4]),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}
