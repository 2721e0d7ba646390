//! Power-battery endpoint detection: annotation handling, label synthesis,
//! inspection metrics, a synthetic X-ray generator, selective state-space
//! scans and a prompt-filtered endpoint detection network.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod annotation;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod imaging;
pub mod kernels;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod ss2d;
pub mod synth;
pub mod tensor;

pub use annotation::{EndpointAnnotation, Point, Polarity, StackAxis};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
