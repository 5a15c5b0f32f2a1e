//! Flow-matching teachers and shortcut distillation on 2-D toy densities.
//!
//! Numeric types are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the double-precision instantiation used by the experiments.

pub mod data;
pub mod distill;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod shortcut;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tape::Tape<f64>;
pub type Theta64 = net::Theta<f64>;
pub type LoraDelta64 = net::LoraDelta<f64>;
