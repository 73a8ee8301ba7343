//! Risk-aware pixel attribution.
//!
//! A small CNN trained with dropout is run `T` times with dropout kept on at
//! inference time. Each pass yields a CAM-family saliency map; the stack of
//! maps gives a per-pixel expectation (the enhanced map) and a per-pixel
//! coefficient of variation (the risk map). The [`metrics`] module scores
//! maps with Average Drop, Coherency, Complexity and their harmonic mean,
//! ADCC.

pub mod attrib;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod risk;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
