//! Tensors, reverse-mode differentiation and the AdamW optimizer.

mod graph;
mod optim;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, Kernel, Var};
pub use optim::{lr_at, AdamW, AdamWConfig, ScheduleConfig};
pub use real::Real;
pub use tensor::Tensor;

/// Element precision used by a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}
