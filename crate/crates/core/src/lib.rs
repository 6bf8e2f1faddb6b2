pub mod autodiff;
pub mod cli;
pub mod codec;
pub mod error;
pub mod metrics;
mod kernels;
pub mod model;
pub mod pipeline;
pub mod rope;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod world;

pub use autodiff::{finite_diff_check, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
