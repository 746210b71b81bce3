//! Sparse-view parallel-beam CT reconstruction with a trainable AUTOMAP
//! network, written against a small reverse-mode autodiff engine.
//!
//! The crate covers the whole experimental pipeline: MNIST ingestion and
//! split protocols, synthetic Hounsfield-unit phantoms, sinogram encoding,
//! network training with RMSProp, and evaluation by RMSE and an automated
//! false-digit judge. A filtered-backprojection baseline is included for
//! comparison.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod formats;
pub mod model;
mod error;
mod gemm;
pub mod radon;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
