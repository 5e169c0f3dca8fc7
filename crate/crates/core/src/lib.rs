//! Squeeze-and-excitation ResNet speaker embeddings, built on a small
//! reverse-mode autograd engine.

pub mod analysis;
pub mod autograd;
pub mod config;
pub mod error;
pub mod experiment;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod se;
pub mod sevx;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
