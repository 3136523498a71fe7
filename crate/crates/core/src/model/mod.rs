//! End-to-end inference of small quantized CNNs described in JSON, with GEMM
//! layers offloaded to a simulated accelerator.
//!
//! # Model format
//!
//! A model is a JSON object `{ "name", "input", "layers" }`. `input` and each
//! layer's `output` are `{ "shape", "scale", "zero_point" }` (NHWC shapes for
//! spatial tensors). A layer is `{ "name", "inputs"?, "op", "output" }` where
//! `inputs` lists producer layer names (or `"input"`) and defaults to the
//! previous layer. `op.kind` is one of `conv2d`, `depthwise_conv2d`,
//! `fully_connected`, `max_pool`, `avg_pool`, `add`, `clamp`.
//!
//! The weights file is the concatenation, in layer order, of each weighted
//! layer's u8 weights followed by its little-endian i32 biases.

pub mod fixtures;
mod reference;
mod run;
mod spec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use reference::{cpu_reference_layer, layer_requant, lower_to_gemm, AddParams, ADD_LEFT_SHIFT};
pub use run::{run_inference, tensor_digest, Backend, InferenceReport, LayerCategory, LayerReport};
pub use spec::{
    infer_shape, load_model, LayerDef, LayerOp, LayerParams, ModelGraph, ModelSpec, Padding, TensorInfo,
    WeightQuant, INPUT_NAME,
};

use crate::error::Result;
use crate::quant::QuantTensor;

/// Uniformly random model input drawn from `seed`.
pub fn random_input(model: &ModelSpec, seed: u64) -> Result<QuantTensor> {
    let info = model.input_info();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..info.len()).map(|_| rng.gen()).collect();
    QuantTensor::new(data, info.shape.clone(), info.scale, info.zero_point)
}

/// Model input from raw bytes in NHWC order.
pub fn input_from_bytes(model: &ModelSpec, bytes: Vec<u8>) -> Result<QuantTensor> {
    let info = model.input_info();
    QuantTensor::new(bytes, info.shape.clone(), info.scale, info.zero_point)
}
