//! Polyp segmentation with dynamic kernels, on a small tape-based autodiff core.
//!
//! Numerical code is generic over [`Scalar`] (`f32`, `f64`); the aliases
//! below name the single-precision types used for training and inference.

pub mod attention;
pub mod backbone;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod scalar;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor, Var};
pub use train::TrainConfig;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type SegModel32 = model::SegModel<f32>;
pub type SegModel64 = model::SegModel<f64>;
pub type Sample32 = data::Sample<f32>;
