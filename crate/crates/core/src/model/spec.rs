use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::driver::ConvGeometry;
use crate::error::{Error, Result};
use crate::quant::Activation;

use super::reference::{layer_requant, AddParams};

/// Name under which layers refer to the model input.
pub const INPUT_NAME: &str = "input";

/// Shape and affine quantization of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub shape: Vec<usize>,
    pub scale: f64,
    pub zero_point: u8,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_quant(&self, other: &TensorInfo) -> bool {
        self.scale == other.scale && self.zero_point == other.zero_point
    }
}

/// Quantization of a layer's weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightQuant {
    pub scale: f64,
    pub zero_point: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    pub fn geometry(self, kernel: [usize; 2], stride: usize, in_h: usize, in_w: usize) -> ConvGeometry {
        match self {
            Padding::Same => ConvGeometry::same((kernel[0], kernel[1]), stride, in_h, in_w),
            Padding::Valid => ConvGeometry::new((kernel[0], kernel[1]), stride, 0),
        }
    }
}

/// Operator of one layer. Weighted operators store, in the weights file, the
/// u8 weights followed by one little-endian i32 bias per output channel.
///
/// Weight layouts: conv2d `[filters, kh, kw, in_c]`, depthwise_conv2d
/// `[kh, kw, in_c * depth_multiplier]`, fully_connected `[units, features]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerOp {
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
        #[serde(default)]
        activation: Activation,
        weights: WeightQuant,
    },
    DepthwiseConv2d {
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
        #[serde(default = "one")]
        depth_multiplier: usize,
        #[serde(default)]
        activation: Activation,
        weights: WeightQuant,
    },
    FullyConnected {
        units: usize,
        #[serde(default)]
        activation: Activation,
        weights: WeightQuant,
    },
    MaxPool {
        pool: [usize; 2],
        stride: usize,
        padding: Padding,
    },
    AvgPool {
        pool: [usize; 2],
        stride: usize,
        padding: Padding,
    },
    Add {
        #[serde(default)]
        activation: Activation,
    },
    Clamp {
        min: u8,
        max: u8,
    },
}

fn one() -> usize {
    1
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Conv2d { .. } => "conv2d",
            LayerOp::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerOp::FullyConnected { .. } => "fully_connected",
            LayerOp::MaxPool { .. } => "max_pool",
            LayerOp::AvgPool { .. } => "avg_pool",
            LayerOp::Add { .. } => "add",
            LayerOp::Clamp { .. } => "clamp",
        }
    }

    /// Layers lowered to GEMM and offloaded on accelerator backends.
    pub fn is_gemm(&self) -> bool {
        matches!(self, LayerOp::Conv2d { .. } | LayerOp::FullyConnected { .. })
    }

    pub fn arity(&self) -> usize {
        if matches!(self, LayerOp::Add { .. }) {
            2
        } else {
            1
        }
    }

    pub fn weight_quant(&self) -> Option<WeightQuant> {
        match self {
            LayerOp::Conv2d { weights, .. }
            | LayerOp::DepthwiseConv2d { weights, .. }
            | LayerOp::FullyConnected { weights, .. } => Some(*weights),
            _ => None,
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerOp::Conv2d { activation, .. }
            | LayerOp::DepthwiseConv2d { activation, .. }
            | LayerOp::FullyConnected { activation, .. }
            | LayerOp::Add { activation } => *activation,
            _ => Activation::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDef {
    pub name: String,
    /// Producer names; empty means the previous layer (or the model input).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    pub op: LayerOp,
    pub output: TensorInfo,
}

/// The JSON model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGraph {
    pub name: String,
    pub input: TensorInfo,
    pub layers: Vec<LayerDef>,
}

/// Weights and per-channel bias of one weighted layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub weights: Vec<u8>,
    pub bias: Vec<i32>,
}

/// A validated model: graph, resolved producers and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub graph: ModelGraph,
    /// For each layer, producer indices where `None` is the model input.
    pub sources: Vec<Vec<Option<usize>>>,
    pub params: Vec<Option<LayerParams>>,
}

fn model_err(layer: &str, msg: impl std::fmt::Display) -> Error {
    Error::Model(format!("layer '{layer}': {msg}"))
}

/// Weight and bias element counts of a layer given its (first) input shape.
fn param_counts(op: &LayerOp, input: &[usize]) -> Option<(usize, usize)> {
    let in_c = *input.last()?;
    match op {
        LayerOp::Conv2d { filters, kernel, .. } => Some((filters * kernel[0] * kernel[1] * in_c, *filters)),
        LayerOp::DepthwiseConv2d { kernel, depth_multiplier, .. } => {
            let out_c = in_c * depth_multiplier;
            Some((kernel[0] * kernel[1] * out_c, out_c))
        }
        LayerOp::FullyConnected { units, .. } => {
            let features: usize = input[1..].iter().product();
            Some((units * features, *units))
        }
        _ => None,
    }
}

/// Output shape of `op` applied to `inputs`.
pub fn infer_shape(op: &LayerOp, inputs: &[&TensorInfo]) -> Result<Vec<usize>> {
    let first = &inputs[0].shape;
    let nhwc = || -> Result<[usize; 4]> {
        <[usize; 4]>::try_from(first.as_slice())
            .map_err(|_| Error::dims(format!("expected an NHWC input, got shape {first:?}")))
    };
    let spatial = |kernel: [usize; 2], stride: usize, padding: Padding| -> Result<[usize; 4]> {
        let s = nhwc()?;
        if stride == 0 || kernel.contains(&0) {
            return Err(Error::param("kernel and stride must be positive"));
        }
        let (oh, ow) = padding.geometry(kernel, stride, s[1], s[2]).output_dims(s[1], s[2])?;
        Ok([s[0], oh, ow, s[3]])
    };
    match op {
        LayerOp::Conv2d { filters, kernel, stride, padding, .. } => {
            let [n, h, w, _] = spatial(*kernel, *stride, *padding)?;
            if *filters == 0 {
                return Err(Error::param("filters must be positive"));
            }
            Ok(vec![n, h, w, *filters])
        }
        LayerOp::DepthwiseConv2d { kernel, stride, padding, depth_multiplier, .. } => {
            let [n, h, w, c] = spatial(*kernel, *stride, *padding)?;
            if *depth_multiplier == 0 {
                return Err(Error::param("depth_multiplier must be positive"));
            }
            Ok(vec![n, h, w, c * depth_multiplier])
        }
        LayerOp::FullyConnected { units, .. } => {
            if first.len() < 2 || *units == 0 {
                return Err(Error::dims(format!("fully_connected needs a batched input, got {first:?}")));
            }
            Ok(vec![first[0], *units])
        }
        LayerOp::MaxPool { pool, stride, padding } | LayerOp::AvgPool { pool, stride, padding } => {
            Ok(spatial(*pool, *stride, *padding)?.to_vec())
        }
        LayerOp::Add { .. } => {
            if inputs[1].shape != *first {
                return Err(Error::dims(format!(
                    "add operands differ in shape: {first:?} vs {:?}",
                    inputs[1].shape
                )));
            }
            Ok(first.clone())
        }
        LayerOp::Clamp { min, max } => {
            if min > max {
                return Err(Error::param(format!("clamp min {min} > max {max}")));
            }
            Ok(first.clone())
        }
    }
}

impl ModelSpec {
    /// Check the graph and attach parameters parsed from `weights`.
    pub fn new(graph: ModelGraph, weights: &[u8]) -> Result<Self> {
        if graph.layers.is_empty() {
            return Err(Error::Model("model has no layers".into()));
        }
        if graph.input.shape.is_empty() || graph.input.is_empty() {
            return Err(Error::Model(format!("invalid input shape {:?}", graph.input.shape)));
        }
        check_scale("input", graph.input.scale)?;
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut sources = Vec::with_capacity(graph.layers.len());
        let mut consumed = vec![false; graph.layers.len()];
        let mut params = Vec::with_capacity(graph.layers.len());
        let mut offset = 0usize;
        for (i, layer) in graph.layers.iter().enumerate() {
            let name = layer.name.as_str();
            if name.is_empty() || name == INPUT_NAME || index.contains_key(name) {
                return Err(model_err(name, "layer names must be unique, non-empty and not 'input'"));
            }
            let refs: Vec<Option<usize>> = if layer.inputs.is_empty() {
                vec![i.checked_sub(1)]
            } else {
                layer
                    .inputs
                    .iter()
                    .map(|r| {
                        if r == INPUT_NAME {
                            Ok(None)
                        } else {
                            index
                                .get(r.as_str())
                                .map(|&j| Some(j))
                                .ok_or_else(|| model_err(name, format!("dangling reference to '{r}'")))
                        }
                    })
                    .collect::<Result<_>>()?
            };
            if refs.len() != layer.op.arity() {
                return Err(model_err(
                    name,
                    format!("{} takes {} input(s), got {}", layer.op.kind_name(), layer.op.arity(), refs.len()),
                ));
            }
            for r in refs.iter().flatten() {
                consumed[*r] = true;
            }
            let infos: Vec<&TensorInfo> = refs
                .iter()
                .map(|r| r.map_or(&graph.input, |j| &graph.layers[j].output))
                .collect();
            let shape = infer_shape(&layer.op, &infos).map_err(|e| model_err(name, e))?;
            if shape != layer.output.shape {
                return Err(model_err(
                    name,
                    format!("declared output shape {:?} but inputs produce {shape:?}", layer.output.shape),
                ));
            }
            check_scale(name, layer.output.scale)?;
            check_quant(layer, &infos)?;
            let p = match param_counts(&layer.op, &infos[0].shape) {
                Some((nw, nb)) => {
                    let need = nw + 4 * nb;
                    let have = weights.len().saturating_sub(offset);
                    if have < need {
                        return Err(model_err(
                            name,
                            format!(
                                "weights file too short: need {need} bytes at offset {offset}, {have} remain"
                            ),
                        ));
                    }
                    let w = weights[offset..offset + nw].to_vec();
                    let bias = weights[offset + nw..offset + need]
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    offset += need;
                    Some(LayerParams { weights: w, bias })
                }
                None => None,
            };
            params.push(p);
            sources.push(refs);
            index.insert(name, i);
        }
        if offset != weights.len() {
            return Err(Error::Model(format!(
                "weights file has {} unreferenced trailing bytes",
                weights.len() - offset
            )));
        }
        let last = graph.layers.len() - 1;
        if let Some(j) = consumed[..last].iter().position(|c| !c) {
            return Err(model_err(&graph.layers[j].name, "output is never consumed"));
        }
        let spec = Self { graph, sources, params };
        for (i, layer) in spec.graph.layers.iter().enumerate() {
            if layer.op.weight_quant().is_some() {
                layer_requant(&spec, i).map_err(|e| model_err(&layer.name, e))?;
            }
            if let LayerOp::Add { .. } = layer.op {
                let ins = spec.input_infos(i);
                AddParams::new(ins[0].scale, ins[1].scale, layer.output.scale)
                    .map_err(|e| model_err(&layer.name, e))?;
            }
        }
        Ok(spec)
    }

    pub fn layers(&self) -> &[LayerDef] {
        &self.graph.layers
    }

    pub fn input_info(&self) -> &TensorInfo {
        &self.graph.input
    }

    pub fn output_info(&self) -> &TensorInfo {
        &self.graph.layers.last().expect("validated non-empty").output
    }

    pub fn input_infos(&self, layer: usize) -> Vec<&TensorInfo> {
        self.sources[layer]
            .iter()
            .map(|r| r.map_or(&self.graph.input, |j| &self.graph.layers[j].output))
            .collect()
    }

    /// Real accumulator-to-output scale of a weighted layer.
    pub fn requant_scale(&self, layer: usize) -> Result<Option<f64>> {
        let def = &self.graph.layers[layer];
        let Some(wq) = def.op.weight_quant() else {
            return Ok(None);
        };
        let real = self.input_infos(layer)[0].scale * wq.scale / def.output.scale;
        if !(real > 0.0 && real < 1.0) {
            return Err(model_err(&def.name, format!("requantization scale {real} outside (0, 1)")));
        }
        Ok(Some(real))
    }

    /// Concatenated parameters in layer order.
    pub fn weights_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().flatten() {
            out.extend_from_slice(&p.weights);
            for b in &p.bias {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.graph).map_err(|e| Error::Model(e.to_string()))
    }

    pub fn from_slices(spec_json: &str, weights: &[u8]) -> Result<Self> {
        let graph: ModelGraph =
            serde_json::from_str(spec_json).map_err(|e| Error::Model(format!("schema violation: {e}")))?;
        Self::new(graph, weights)
    }

    pub fn save(&self, spec_file: &Path, weights_file: &Path) -> Result<()> {
        let io = |p: &Path, e: std::io::Error| Error::Model(format!("{}: {e}", p.display()));
        std::fs::write(spec_file, self.to_json()? + "\n").map_err(|e| io(spec_file, e))?;
        std::fs::write(weights_file, self.weights_bytes()).map_err(|e| io(weights_file, e))
    }
}

fn check_scale(name: &str, scale: f64) -> Result<()> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(model_err(name, format!("scale must be positive, got {scale}")))
    }
}

fn check_quant(layer: &LayerDef, inputs: &[&TensorInfo]) -> Result<()> {
    let passthrough = matches!(
        layer.op,
        LayerOp::MaxPool { .. } | LayerOp::AvgPool { .. } | LayerOp::Clamp { .. }
    );
    if passthrough && !layer.output.same_quant(inputs[0]) {
        return Err(model_err(
            &layer.name,
            format!("{} must keep its input quantization", layer.op.kind_name()),
        ));
    }
    if let Some(wq) = layer.op.weight_quant() {
        check_scale(&layer.name, wq.scale)?;
    }
    Ok(())
}

/// Read and validate a model description and its weights file.
pub fn load_model(spec_file: &Path, weights_file: &Path) -> Result<ModelSpec> {
    let json = std::fs::read_to_string(spec_file)
        .map_err(|e| Error::Model(format!("{}: {e}", spec_file.display())))?;
    let weights =
        std::fs::read(weights_file).map_err(|e| Error::Model(format!("{}: {e}", weights_file.display())))?;
    ModelSpec::from_slices(&json, &weights)
}
