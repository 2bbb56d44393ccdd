//! Minimal dense-tensor kernel: tape-based reverse-mode gradients, MLP
//! forward passes, and an Adam optimizer. All model math goes through here.

mod adam;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::{grad_check, AdamConfig, AdamState};
pub use mlp::{forward_mlp, register_mlp, Activation, MlpSpec};
pub use params::{ParamSet, ParameterBlock};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
