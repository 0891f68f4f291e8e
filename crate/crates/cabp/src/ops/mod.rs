//! Layer math: forward implementations and their backward rules.

pub mod activation;
pub mod batchnorm;
pub mod conv;
mod gemm;
pub mod linear;
pub mod loss;
pub mod pool;
pub mod rules;

pub use conv::{Conv2dSpec, SavePolicy};
