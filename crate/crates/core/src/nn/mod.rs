//! Minimal `f64` autodiff used by the encoder and the MAPPO learner.

mod graph;
mod layers;
mod params;
mod tensor;

pub use graph::{Grads, Graph, Var, ROW_NORMALIZE_EPS};
pub use layers::{Linear, Mlp, Norm};
pub use params::{clip_grad_norm, Adam, AdamConfig, NamedArray, ParamId, ParamStore};
pub use tensor::Tensor;
