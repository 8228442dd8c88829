use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero-sized dimension")]
    ZeroDim(Vec<usize>),
    #[error("row range {start}..{end} invalid for {rows} rows")]
    RowRange { start: usize, end: usize, rows: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch at node `{node}`: {detail}")]
    Shape { node: String, detail: String },
    #[error("loss node `{node}` is not scalar (shape {shape:?})")]
    NonScalarLoss { node: String, shape: Vec<usize> },
    #[error("unknown parameter id {0}")]
    UnknownParam(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{name}`; training diverged")]
    NonFiniteGradient { name: String },
    #[error("gradient for parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}
