//! Differentiable f64 tensors, a reverse-mode tape and AdamW.

mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod serial;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use graph::{dropout_mask, sigmoid, GradPolicy, Graph, Var, SIGMOID_CLAMP};
pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimizerState};
pub use tensor::{Gradients, ParamId, ParamStore, Parameter, Tensor};
