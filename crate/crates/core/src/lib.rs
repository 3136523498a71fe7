//! Transaction-level simulation of two int8 GEMM accelerator designs (a
//! Vector-MAC array of GEMM units and an output-stationary systolic array),
//! the host-side driver that feeds them, and an end-to-end inference harness
//! for small quantized CNNs.

pub mod accel;
pub mod cost;
pub mod driver;
pub mod error;
pub mod model;
pub mod par;
pub mod quant;
pub mod sim;

pub use error::{Error, Result};
