//! Strip cross-attention segmentation decoder on a small fp64 tensor engine
//! with reverse-mode gradients and an instrumented cost model.

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod selftest;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
