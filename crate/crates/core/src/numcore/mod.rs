//! Dense `f64` tensors, a define-by-run gradient tape, Adam, and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod lstm;
mod params;
pub mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Primitive, RecordEntry, Var};
pub use lstm::{lstm_cell, LstmCell};
pub use params::{AdamConfig, ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("invalid attribute: {0}")]
    InvalidAttribute(String),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("computation record already consumed by a backward pass")]
    RecordConsumed,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("function evaluated twice gave different results")]
    NonDeterministic,
    #[error("graph has no parameter store")]
    NoParamStore,
    #[error("unknown parameter id {0}")]
    UnknownParam(usize),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
}
