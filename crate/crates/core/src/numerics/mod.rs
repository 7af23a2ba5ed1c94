//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport, GroupReport, CANCELLATION_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub(crate) use graph::{conv1d_rows, row_population_std};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("loss does not depend on any parameter")]
    Detached,
    #[error("gradcheck: {0}")]
    Gradcheck(String),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }
}
