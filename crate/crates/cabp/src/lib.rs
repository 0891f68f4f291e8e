//! Training engine for convolutional networks that stores average-pooled
//! activations for the backward pass.
//!
//! The forward pass and the propagated input/bias gradients are exact; only
//! weight gradients are computed from the pooled (then re-inflated) payloads.
//! A byte-accurate memory ledger, a static per-layer memory model, ResNet
//! builders with per-layer save policies, an SGD training harness, and a
//! gradient cosine-similarity analyzer sit on top of that core.
//!
//! Everything numeric is generic over the scalar type ([`scalar::Scalar`]):
//! `f32` is the training dtype, `f64` backs the finite-difference oracles.

pub mod analysis;
pub mod checkpoint;
pub mod compress;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod ledger;
pub mod memmodel;
pub mod model;
pub mod ops;
pub mod reference;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{AllocCategory, Tensor};

/// Concrete aliases for the two supported element types.
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = model::Network<f32>;
pub type Network64 = model::Network<f64>;
