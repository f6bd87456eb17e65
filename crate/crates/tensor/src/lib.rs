//! Dense `f64` tensors with a recorded computation graph, reverse-mode
//! gradients, SGD/Adam optimizers, finite-difference checking and a JSON
//! checkpoint format.

mod error;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{log_sum_exp, Axis, Gradients, Graph, NodeId};
pub use optim::{Adam, AdamConfig, Optimizer, Sgd, SgdConfig};
pub use params::ParamStore;
pub use tensor::Tensor;
