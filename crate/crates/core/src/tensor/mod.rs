//! Dense row-major tensors, the reverse-mode tape, and the numerical
//! utilities built on them (gradient checking, optimizers, checkpoints).

mod array;
pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;

pub use array::Tensor;
pub use params::{ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};
