//! Quantization-aware training with learnable bit-widths driven by
//! noise-based straight-through gradients, an exterior-point bit-width
//! penalty and Jeffreys distillation from a full-precision teacher.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! training pipeline, checkpoints and oracles run in `f64`. The aliases below
//! name the `f64` instantiations.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod oracles;
pub mod pipeline;
pub mod quantizer;
pub mod scalar;

pub use error::{Error, Result};

pub type Tensor = autodiff::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type FakeQuantizer = quantizer::FakeQuantizer<f64>;
pub type QuantizedLayer = quantizer::QuantizedLayer<f64>;
pub type FusedLayer = quantizer::FusedLayer<f64>;
pub type Model = model::Model<f64>;
pub type FusedModel = model::FusedModel<f64>;
pub type Dataset = data::Dataset<f64>;
pub type Splits = data::Splits<f64>;
pub type LossState = losses::LossState<f64>;
pub type RAdam = optim::RAdam<f64>;
pub type LrPolicy = optim::LrPolicy<f64>;
