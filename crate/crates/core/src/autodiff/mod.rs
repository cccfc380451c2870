//! Dense-array reverse-mode automatic differentiation with higher-order
//! gradients.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, CoordinateCheck, GradCheckReport, FD_STEP};
pub use graph::{log_sum_exp, softplus, BinaryFn, Graph, NodeId, UnaryFn};
pub use tensor::Tensor;
