use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("array of shape {rows}x{cols} needs {expected} values, got {got}")]
    Length {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("backward needs a 1x1 root, got {0:?}")]
    NonScalarRoot((usize, usize)),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{0}` already registered")]
    DuplicateParameter(String),

    #[error("loss builder is not deterministic: {first:e} then {second:e}")]
    NonDeterministic { first: f64, second: f64 },
}
