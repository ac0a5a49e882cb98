//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{Elementwise, Graph, NodeId};
pub use tensor::Tensor;
