//! Relational prior knowledge graphs and the feature-enhancement stack
//! built on them, on top of a small reverse-mode autodiff tensor library.

pub mod checks;
pub mod error;
pub mod graph_transformer;
pub mod relation_head;
pub mod rpkg;
pub mod scalar;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type Rpkg64 = rpkg::RelationalPriorKnowledgeGraph<f64>;
pub type Rpkg32 = rpkg::RelationalPriorKnowledgeGraph<f32>;
