//! Reverse-mode differentiation, Adam, and target-network averaging.

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Bound, Gradients, Graph, Var};
pub use optim::{
    adam_step, polyak_update, AdamConfig, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DEFAULT_LR, DEFAULT_TAU,
};
pub use tensor::{ParamSet, Tensor};
