//! Differentiable model: tensors, the recording tape, the CNN and its
//! optimizer.

pub mod graph;
pub mod network;
pub mod ops;
pub mod optim;
pub mod serialize;
pub mod tensor;

pub use graph::{Activation, Graph, Var};
pub use network::{Mode, ModelConfig, ModelParams, NamedTensor, ParamGroup};
pub use optim::{OptimState, SgdConfig};
pub use tensor::Tensor;
