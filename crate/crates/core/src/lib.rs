pub mod autodiff;
pub mod envs;
pub mod finetune;
pub mod flow;
mod error;
pub mod intention;
pub mod nets;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
