//! Seeded generators for the desk-scale models shipped under `fixtures/models`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::quant::Activation;

use super::spec::{
    infer_shape, LayerDef, LayerOp, ModelGraph, ModelSpec, Padding, TensorInfo, WeightQuant, INPUT_NAME,
};

const WEIGHTS: WeightQuant = WeightQuant {
    scale: 0.01,
    zero_point: 128,
};

struct Builder {
    rng: ChaCha8Rng,
    graph: ModelGraph,
    weights: Vec<u8>,
}

impl Builder {
    fn new(name: &str, seed: u64, input: TensorInfo) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            graph: ModelGraph {
                name: name.into(),
                input,
                layers: Vec::new(),
            },
            weights: Vec::new(),
        }
    }

    fn info(&self, name: &str) -> &TensorInfo {
        if name == INPUT_NAME {
            return &self.graph.input;
        }
        &self.graph.layers.iter().find(|l| l.name == name).expect("known layer").output
    }

    fn last(&self) -> String {
        self.graph.layers.last().map_or(INPUT_NAME.to_string(), |l| l.name.clone())
    }

    /// Append a layer. Weighted layers get random parameters and an output
    /// scale that keeps the typical accumulator spread inside 8 bits.
    fn push(&mut self, name: &str, inputs: &[&str], op: LayerOp, out_zp: Option<u8>, out_scale: Option<f64>) {
        let src: Vec<String> = if inputs.is_empty() {
            vec![self.last()]
        } else {
            inputs.iter().map(|s| s.to_string()).collect()
        };
        let infos: Vec<TensorInfo> = src.iter().map(|s| self.info(s).clone()).collect();
        let refs: Vec<&TensorInfo> = infos.iter().collect();
        let shape = infer_shape(&op, &refs).expect("fixture shapes are valid");
        let first = &infos[0];
        let mut output = TensorInfo {
            shape: shape.clone(),
            scale: first.scale,
            zero_point: first.zero_point,
        };
        let depth = match &op {
            LayerOp::Conv2d { kernel, filters, .. } => Some((kernel[0] * kernel[1] * first.shape[3], *filters)),
            LayerOp::DepthwiseConv2d { kernel, .. } => Some((kernel[0] * kernel[1], shape[3])),
            LayerOp::FullyConnected { units, .. } => Some((first.len() / first.shape[0], *units)),
            _ => None,
        };
        if let Some((k, channels)) = depth {
            let n_w = k * channels;
            for _ in 0..n_w {
                let w: u8 = self.rng.gen();
                self.weights.push(w);
            }
            for _ in 0..channels {
                let b: i32 = self.rng.gen_range(-2000..2000);
                self.weights.extend_from_slice(&b.to_le_bytes());
            }
            let real = 1.0 / (100.0 * (k as f64).sqrt());
            output.scale = round_sig(first.scale * WEIGHTS.scale / real);
        }
        if let Some(s) = out_scale {
            output.scale = s;
        }
        if let Some(z) = out_zp {
            output.zero_point = z;
        }
        let explicit = !inputs.is_empty();
        self.graph.layers.push(LayerDef {
            name: name.into(),
            inputs: if explicit { src } else { Vec::new() },
            op,
            output,
        });
    }

    fn finish(self) -> Result<ModelSpec> {
        ModelSpec::new(self.graph, &self.weights)
    }
}

fn round_sig(x: f64) -> f64 {
    let p = 10f64.powi(3 - x.log10().floor() as i32);
    (x * p).round() / p
}

fn conv(filters: usize, k: usize, activation: Activation) -> LayerOp {
    LayerOp::Conv2d {
        filters,
        kernel: [k, k],
        stride: 1,
        padding: Padding::Same,
        activation,
        weights: WEIGHTS,
    }
}

fn fc(units: usize) -> LayerOp {
    LayerOp::FullyConnected {
        units,
        activation: Activation::None,
        weights: WEIGHTS,
    }
}

fn input(shape: Vec<usize>) -> TensorInfo {
    TensorInfo {
        shape,
        scale: 0.02,
        zero_point: 128,
    }
}

/// Four layers: conv 3x3 (ReLU), 2x2 max pool, conv 3x3 (ReLU), fully connected.
pub fn toy_cnn() -> ModelSpec {
    let mut b = Builder::new("toy_cnn", 1, input(vec![1, 16, 16, 3]));
    b.push("conv1", &[], conv(8, 3, Activation::Relu), Some(0), None);
    b.push(
        "pool1",
        &[],
        LayerOp::MaxPool {
            pool: [2, 2],
            stride: 2,
            padding: Padding::Valid,
        },
        None,
        None,
    );
    b.push("conv2", &[], conv(16, 3, Activation::Relu), Some(0), None);
    b.push("logits", &[], fc(10), Some(128), None);
    b.finish().expect("toy_cnn fixture is valid")
}

/// Six layers exercising every CPU-side operator: pointwise conv, depthwise
/// conv, residual add, clamp, global average pool and a classifier.
pub fn residual_block() -> ModelSpec {
    let mut b = Builder::new("residual_block", 2, input(vec![1, 12, 12, 4]));
    b.push("expand", &[], conv(8, 1, Activation::Relu), Some(0), None);
    b.push(
        "depthwise",
        &[],
        LayerOp::DepthwiseConv2d {
            kernel: [3, 3],
            stride: 1,
            padding: Padding::Same,
            depth_multiplier: 1,
            activation: Activation::Relu,
            weights: WEIGHTS,
        },
        Some(0),
        None,
    );
    let sum_scale = round_sig(1.5 * b.info("expand").scale.max(b.info("depthwise").scale));
    b.push(
        "sum",
        &["expand", "depthwise"],
        LayerOp::Add {
            activation: Activation::Relu,
        },
        Some(0),
        Some(sum_scale),
    );
    b.push("clip", &[], LayerOp::Clamp { min: 0, max: 64 }, None, None);
    b.push(
        "gap",
        &[],
        LayerOp::AvgPool {
            pool: [12, 12],
            stride: 1,
            padding: Padding::Valid,
        },
        None,
        None,
    );
    b.push("head", &[], fc(4), Some(128), None);
    b.finish().expect("residual_block fixture is valid")
}

/// One wide 3x3 convolution (M=256, K=576, N=64) dominated by MAC work.
pub fn compute_bound_conv() -> ModelSpec {
    let mut b = Builder::new("compute_bound_conv", 3, input(vec![1, 16, 16, 64]));
    b.push("conv", &[], conv(64, 3, Activation::None), Some(128), None);
    b.finish().expect("compute_bound_conv fixture is valid")
}

/// A single clamp layer.
pub fn clamp_only(shape: Vec<usize>, min: u8, max: u8) -> ModelSpec {
    let mut b = Builder::new("clamp_only", 0, input(shape));
    b.push("clamp", &[], LayerOp::Clamp { min, max }, None, None);
    b.finish().expect("clamp fixture is valid")
}

/// Every shipped fixture with its file stem.
pub fn all() -> Vec<(&'static str, ModelSpec)> {
    vec![
        ("toy_cnn", toy_cnn()),
        ("residual_block", residual_block()),
        ("compute_bound_conv", compute_bound_conv()),
    ]
}
