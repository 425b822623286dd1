use crate::tensor::ShapeError;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("node {node} ({op}): incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a single-element output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("variable {0} has not been recorded by a forward pass on this graph")]
    NotRecorded(usize),
    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient for parameter block `{name}` has {got} values, expected {expected}")]
    GradientLength {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("learning-rate decay needs a positive number of steps")]
    ZeroDecaySteps,
    #[error("learning rates must be positive, got start {start} and end {end}")]
    InvalidLearningRate { start: f64, end: f64 },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;
