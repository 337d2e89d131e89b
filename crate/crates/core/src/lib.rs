//! Asymmetric RGB-SAR fusion for land-cover segmentation, built on a small
//! reverse-mode autodiff engine.

pub mod data;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod gradsuite;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{no_grad, DType, Element, Tensor};
