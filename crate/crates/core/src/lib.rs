//! A from-scratch convolutional network training engine.
//!
//! The core math is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which is what the CLI and the
//! diagnostics use.

pub mod backprop;
pub mod config;
pub mod data;
pub mod diagnose;
pub mod error;
pub mod init;
pub mod model_io;
pub mod net;
pub mod optimize;
pub mod parallel;
pub mod regularize;
pub mod scalar;
pub mod seeds;
pub mod tensor;
pub mod train;

pub use error::ShapeError;
pub use scalar::Scalar;

/// `f64` instantiations of the generic core.
pub type FeatureMap = tensor::FeatureMap<f64>;
pub type FilterBank = tensor::FilterBank<f64>;
pub type Network = net::Network<f64>;
pub type Gradients = backprop::Gradients<f64>;
pub type Example = train::Example<f64>;
