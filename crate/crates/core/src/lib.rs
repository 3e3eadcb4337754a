//! Backpropagation-free training of real-quantized INT8 networks.

pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod prng;
pub mod profiler;
pub mod quant;
pub mod sparse;
pub mod train;
pub mod zo;

pub use error::{Error, Result};
