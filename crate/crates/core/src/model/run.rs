use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accel::{AccelConfig, DesignKind};
use crate::driver::dispatch_with;
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::quant::QuantTensor;
use crate::sim::CycleCounters;

use super::reference::{cpu_reference_layer, lower_to_gemm};
use super::spec::{LayerOp, ModelSpec};

/// Where GEMM layers execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Cpu,
    Vm,
    Sa,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Cpu, Backend::Vm, Backend::Sa];

    pub fn design(self) -> Option<DesignKind> {
        match self {
            Backend::Cpu => None,
            Backend::Vm => Some(DesignKind::Vm),
            Backend::Sa => Some(DesignKind::Sa),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Cpu => "cpu",
            Backend::Vm => "vm",
            Backend::Sa => "sa",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpu" => Ok(Backend::Cpu),
            "vm" => Ok(Backend::Vm),
            "sa" => Ok(Backend::Sa),
            _ => Err(Error::param(format!("unknown backend '{s}' (expected cpu, vm or sa)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerCategory {
    Conv,
    NonConv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: String,
    pub category: LayerCategory,
    pub offloaded: bool,
    /// Elapsed model cycles charged to the layer.
    pub elapsed_cycles: u64,
    /// Modeled host CPU work (im2col, packing, unpacking or the whole layer).
    pub cpu_cycles: u64,
    /// Accelerator transfer plus compute cycles.
    pub accelerator_cycles: u64,
    /// Accelerator cycles after input transfer completes.
    pub compute_cycles: u64,
    /// Cycles from first MAC to last completed tile, summed over invocations.
    pub mac_window_cycles: u64,
    pub counters: CycleCounters,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub model: String,
    pub backend: Backend,
    pub layers: Vec<LayerReport>,
    pub conv_cycles: u64,
    pub non_conv_cycles: u64,
    pub overall_cycles: u64,
    pub accelerator_cycles: u64,
    pub compute_cycles: u64,
    pub mac_window_cycles: u64,
    pub counters: CycleCounters,
    pub output_shape: Vec<usize>,
    /// Hex SHA-256 of the output tensor bytes.
    pub output_digest: String,
}

/// Hex SHA-256 of a tensor's bytes.
pub fn tensor_digest(t: &QuantTensor) -> String {
    hex::encode(Sha256::digest(t.data()))
}

/// Modeled CPU cycles of a layer that runs on the host.
fn cpu_layer_cycles(op: &LayerOp, inputs: &[&QuantTensor], out_len: usize, config: &AccelConfig) -> u64 {
    let d = &config.driver;
    match op {
        LayerOp::Conv2d { .. } | LayerOp::FullyConnected { .. } => {
            let k = inputs[0].len() / inputs[0].shape()[0];
            let macs = match op {
                LayerOp::Conv2d { kernel, .. } => out_len * kernel[0] * kernel[1] * inputs[0].shape()[3],
                _ => out_len * k,
            };
            d.cpu_cycles_for_macs(macs as u64) + d.cpu_cycles_for_bytes(out_len as u64)
        }
        LayerOp::DepthwiseConv2d { kernel, .. } => {
            d.cpu_cycles_for_macs((out_len * kernel[0] * kernel[1]) as u64) + d.cpu_cycles_for_bytes(out_len as u64)
        }
        LayerOp::MaxPool { .. } | LayerOp::AvgPool { .. } => d.cpu_cycles_for_bytes(inputs[0].len() as u64),
        LayerOp::Add { .. } => d.cpu_cycles_for_bytes(3 * out_len as u64),
        LayerOp::Clamp { .. } => d.cpu_cycles_for_bytes(out_len as u64),
    }
}

/// Run the model end to end. GEMM layers go through im2col and the driver
/// on accelerator backends; every other layer runs on the CPU path.
pub fn run_inference(
    model: &ModelSpec,
    input: &QuantTensor,
    backend: Backend,
    config: &AccelConfig,
) -> Result<(QuantTensor, InferenceReport)> {
    let info = model.input_info();
    if input.shape() != info.shape.as_slice() {
        return Err(Error::dims(format!(
            "input shape {:?} does not match model input {:?}",
            input.shape(),
            info.shape
        )));
    }
    if input.scale() != info.scale || input.zero_point() != info.zero_point {
        return Err(Error::param("input quantization does not match the model input"));
    }
    let mut config = config.clone();
    if let Some(kind) = backend.design() {
        config.kind = kind;
    }
    config.validate()?;

    let mut values: Vec<QuantTensor> = Vec::with_capacity(model.layers().len());
    let mut layers = Vec::with_capacity(model.layers().len());
    for (i, def) in model.layers().iter().enumerate() {
        let inputs: Vec<&QuantTensor> = model.sources[i].iter().map(|s| s.map_or(input, |j| &values[j])).collect();
        let category = if def.op.is_gemm() {
            LayerCategory::Conv
        } else {
            LayerCategory::NonConv
        };
        let mut rep = LayerReport {
            name: def.name.clone(),
            kind: def.op.kind_name().to_string(),
            category,
            offloaded: false,
            elapsed_cycles: 0,
            cpu_cycles: 0,
            accelerator_cycles: 0,
            compute_cycles: 0,
            mac_window_cycles: 0,
            counters: CycleCounters::default(),
        };
        let out = if def.op.is_gemm() && backend != Backend::Cpu {
            let task = lower_to_gemm(model, i, inputs[0])?;
            let lowering = match def.op {
                LayerOp::Conv2d { .. } => config.driver.cpu_cycles_for_bytes(task.lhs.len() as u64),
                _ => 0,
            };
            let (mut runs, report) = dispatch_with(std::slice::from_ref(&task), &config, Execution::default())?;
            let run = runs.pop().expect("one task");
            let st = report.stage_totals;
            rep.offloaded = true;
            rep.accelerator_cycles = st.transfer + st.compute;
            rep.compute_cycles = st.compute;
            rep.mac_window_cycles = run.compute_window;
            rep.cpu_cycles = lowering + st.pack + st.unpack;
            rep.elapsed_cycles = lowering + report.elapsed_cycles;
            rep.counters = report.counters;
            run.output.reshape(def.output.shape.clone())?
        } else {
            let out = cpu_reference_layer(model, i, &inputs)?;
            rep.cpu_cycles = cpu_layer_cycles(&def.op, &inputs, out.len(), &config);
            rep.elapsed_cycles = rep.cpu_cycles;
            out
        };
        layers.push(rep);
        values.push(out);
    }
    let output = values.pop().expect("non-empty model");
    let mut report = InferenceReport {
        model: model.graph.name.clone(),
        backend,
        conv_cycles: 0,
        non_conv_cycles: 0,
        overall_cycles: 0,
        accelerator_cycles: 0,
        compute_cycles: 0,
        mac_window_cycles: 0,
        counters: CycleCounters::default(),
        output_shape: output.shape().to_vec(),
        output_digest: tensor_digest(&output),
        layers,
    };
    for l in &report.layers {
        match l.category {
            LayerCategory::Conv => report.conv_cycles += l.elapsed_cycles,
            LayerCategory::NonConv => report.non_conv_cycles += l.elapsed_cycles,
        }
        report.overall_cycles += l.elapsed_cycles;
        report.accelerator_cycles += l.accelerator_cycles;
        report.compute_cycles += l.compute_cycles;
        report.mac_window_cycles += l.mac_window_cycles;
        report.counters += &l.counters;
    }
    Ok((output, report))
}
