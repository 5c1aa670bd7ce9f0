//! Sparse-view cone-beam CT reconstruction.
//!
//! The crate provides a differentiable cone-beam projector and FDK operator,
//! a minimal reverse-mode tensor engine, three learned reconstructors
//! (FDKConvNet, a 3-D primal-dual network and a 3-D primal-dual UNet),
//! synthetic data simulation, image quality metrics and the training /
//! evaluation harness behind the `cbct` command-line tool.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below name the two concrete instantiations.

pub mod data;
pub mod error;
pub mod fdk;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod projector;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Volume32 = data::Volume<f32>;
pub type Volume64 = data::Volume<f64>;
pub type ProjectionStack32 = projector::ProjectionStack<f32>;
pub type ProjectionStack64 = projector::ProjectionStack<f64>;
