//! Clean image generators learned from blurred, noisy and compressed images.
//!
//! The core works on any [`Scalar`] (`f32`, `f64` or forward-mode [`Dual`]);
//! the aliases below fix the common precisions.

pub mod config;
pub mod degrade;
pub mod dual;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod losses;
pub mod nets;
pub mod restore;
pub mod scalar;
pub mod settings;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dual, Scalar};

pub type Tape32 = graph::Tape<f32>;
pub type Tape64 = graph::Tape<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Image32 = degrade::Image<f32>;
pub type Image64 = degrade::Image<f64>;
pub type Kernel32 = degrade::BlurKernel<f32>;
pub type Kernel64 = degrade::BlurKernel<f64>;
pub type ParamStore32 = nets::ParamStore<f32>;
pub type ParamStore64 = nets::ParamStore<f64>;
