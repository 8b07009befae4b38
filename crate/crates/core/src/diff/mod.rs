//! Differentiable primitives, parameters, optimizer and gradient checking.

mod adamw;
mod gradcheck;
mod graph;
mod kernels;
mod layers;
mod params;
mod tensor;

pub use adamw::{AdamW, Moments};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{AttentionSpec, Gradients, Graph, TokenAxis, Var, LN_EPS};
pub use layers::{layer_forward, LayerKind};
pub use params::{ParamId, ParamTensor, ParameterStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
