//! Reverse-mode differentiation over dense `f64` arrays plus central-difference
//! gradient and Hessian-vector-product probes.

mod fd;
mod graph;
mod value;

pub use fd::{finite_diff_grad, hvp_fd, hvp_fd_refined, max_relative_error, norm, relative_error};
pub use graph::{batch_moments, log_softmax_row, GradientVector, Graph, NodeId, NormStats, Op};
pub use value::Value;
