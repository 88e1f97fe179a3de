//! Minimal f64 neural-network toolkit: tensors, a differentiable tape,
//! standard layers, Adam and a binary weights container.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod weights;

pub use graph::{Conv2dOpts, Grads, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
