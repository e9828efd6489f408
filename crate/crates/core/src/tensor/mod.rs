//! Minimal dense tensors, a reverse-mode graph and AdamW.

mod gradcheck;
mod graph;
mod optim;
#[allow(clippy::module_inception)]
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, NodeId};
pub use optim::{AdamWConfig, AdamWState};
pub use tensor::Tensor;
