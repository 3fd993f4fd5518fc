//! Reverse-mode differentiation over [`Tensor4`](crate::Tensor4) values and
//! the finite-difference oracle used to certify it.

mod gradcheck;
mod graph;
mod suite;

pub use gradcheck::{central_difference, finite_diff_check, relative_error, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use suite::{case_names, gradcheck_cases, run_gradcheck_suite, GradCase, LossFn};
