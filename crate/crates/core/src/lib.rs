//! Variational autoencoders with discriminative regularization.

pub mod blur;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
