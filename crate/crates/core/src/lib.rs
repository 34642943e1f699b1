//! Temporal action localization over multichannel sensor feature sequences,
//! with channel-wise enhancement modules inside a feature-pyramid transformer.

pub mod backbone;
pub mod config;
pub mod data;
pub mod enhancement;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod heads;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod segment;
pub mod tensor;
pub mod training;

pub use backbone::{ModelConfig, Variant};
pub use error::{Error, Result};
pub use model::Detector;
pub use segment::Segment;
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Detector32 = model::Detector<f32>;
pub type Detector64 = model::Detector<f64>;
