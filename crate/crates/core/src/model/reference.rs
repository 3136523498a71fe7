use crate::driver::{im2col, GemmTask};
use crate::error::{Error, Result};
use crate::quant::{
    quantize_multiplier, requantize, rounding_right_shift, saturating_doubling_high_mul, QuantTensor,
    RequantParams,
};

use super::spec::{LayerOp, ModelSpec, TensorInfo};

/// Fixed-point headroom given to elementwise-add operands before rescaling.
pub const ADD_LEFT_SHIFT: u32 = 20;

/// Fixed-point multipliers of a quantized elementwise add: both operands are
/// rescaled to a common scale of twice the larger input scale, summed, then
/// rescaled to the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddParams {
    pub lhs: (i32, u32),
    pub rhs: (i32, u32),
    pub out: (i32, u32),
}

impl AddParams {
    pub fn new(lhs_scale: f64, rhs_scale: f64, out_scale: f64) -> Result<Self> {
        let twice_max = 2.0 * lhs_scale.max(rhs_scale);
        let out_real = twice_max / ((1u64 << ADD_LEFT_SHIFT) as f64 * out_scale);
        Ok(Self {
            lhs: quantize_multiplier(lhs_scale / twice_max)?,
            rhs: quantize_multiplier(rhs_scale / twice_max)?,
            out: quantize_multiplier(out_real)?,
        })
    }
}

fn scale_by(x: i32, (m, shift): (i32, u32)) -> i32 {
    rounding_right_shift(saturating_doubling_high_mul(x, m), shift)
}

/// Requantization of a weighted layer's accumulators.
pub fn layer_requant(model: &ModelSpec, layer: usize) -> Result<RequantParams> {
    let def = &model.layers()[layer];
    let real = model
        .requant_scale(layer)?
        .ok_or_else(|| Error::Model(format!("layer '{}' has no weights", def.name)))?;
    let bias = params(model, layer)?.1.to_vec();
    let mut p = RequantParams::from_scale(real, bias.len(), def.output.zero_point)?;
    p.bias = bias;
    (p.clamp_min, p.clamp_max) = def.op.activation().clamp_bounds(def.output.scale, def.output.zero_point);
    p.validate()?;
    Ok(p)
}

fn params(model: &ModelSpec, layer: usize) -> Result<(&[u8], &[i32])> {
    model.params[layer]
        .as_ref()
        .map(|p| (p.weights.as_slice(), p.bias.as_slice()))
        .ok_or_else(|| Error::Model(format!("layer '{}' has no parameters", model.layers()[layer].name)))
}

fn tensor(info: &TensorInfo, data: Vec<u8>) -> Result<QuantTensor> {
    QuantTensor::new(data, info.shape.clone(), info.scale, info.zero_point)
}

/// Lower a conv2d or fully_connected layer to a GEMM over its input.
pub fn lower_to_gemm(model: &ModelSpec, layer: usize, input: &QuantTensor) -> Result<GemmTask> {
    let def = &model.layers()[layer];
    let (w, _) = params(model, layer)?;
    let wq = def.op.weight_quant().expect("weighted layer");
    let lhs = match &def.op {
        LayerOp::Conv2d { kernel, stride, padding, .. } => {
            let s = input.shape();
            im2col(input, &padding.geometry(*kernel, *stride, s[1], s[2]))?
        }
        LayerOp::FullyConnected { .. } => {
            let batch = input.shape()[0];
            input.reshape(vec![batch, input.len() / batch])?
        }
        other => {
            return Err(Error::Model(format!(
                "layer '{}': {} is not lowered to GEMM",
                def.name,
                other.kind_name()
            )))
        }
    };
    let k = lhs.shape()[1];
    let n = *def.output.shape.last().expect("non-empty shape");
    let mut rhs = vec![0u8; k * n];
    for o in 0..n {
        for kk in 0..k {
            rhs[kk * n + o] = w[o * k + kk];
        }
    }
    let rhs = QuantTensor::new(rhs, vec![k, n], wq.scale, wq.zero_point)?;
    GemmTask::new(lhs, rhs, layer_requant(model, layer)?, def.output.scale)
}

/// Execute one layer with direct integer arithmetic on the CPU.
pub fn cpu_reference_layer(model: &ModelSpec, layer: usize, inputs: &[&QuantTensor]) -> Result<QuantTensor> {
    let def = &model.layers()[layer];
    let expected = model.input_infos(layer);
    if inputs.len() != expected.len() {
        return Err(Error::Model(format!(
            "layer '{}' expects {} input(s), got {}",
            def.name,
            expected.len(),
            inputs.len()
        )));
    }
    for (t, info) in inputs.iter().zip(&expected) {
        if t.shape() != info.shape.as_slice() {
            return Err(Error::dims(format!(
                "layer '{}' input shape {:?} != {:?}",
                def.name,
                t.shape(),
                info.shape
            )));
        }
    }
    let x = inputs[0];
    let out = &def.output;
    let data = match &def.op {
        LayerOp::Conv2d { kernel, stride, padding, .. } => {
            let (w, _) = params(model, layer)?;
            let rq = layer_requant(model, layer)?;
            let wzp = def.op.weight_quant().expect("weighted").zero_point as i32;
            let [n, h, wd, c] = dims4(x)?;
            let g = padding.geometry(*kernel, *stride, h, wd);
            let [_, oh, ow, oc] = dims4_of(&out.shape);
            let xzp = x.zero_point() as i32;
            let src = x.data();
            let mut data = Vec::with_capacity(out.len());
            for b in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for o in 0..oc {
                            let mut acc = 0i32;
                            for ky in 0..kernel[0] {
                                let Some(iy) = (oy * g.stride_h + ky).checked_sub(g.pad_top).filter(|&v| v < h) else {
                                    continue;
                                };
                                for kx in 0..kernel[1] {
                                    let Some(ix) =
                                        (ox * g.stride_w + kx).checked_sub(g.pad_left).filter(|&v| v < wd)
                                    else {
                                        continue;
                                    };
                                    let xi = ((b * h + iy) * wd + ix) * c;
                                    let wi = ((o * kernel[0] + ky) * kernel[1] + kx) * c;
                                    for ci in 0..c {
                                        acc += (src[xi + ci] as i32 - xzp) * (w[wi + ci] as i32 - wzp);
                                    }
                                }
                            }
                            data.push(requantize(acc, o, &rq));
                        }
                    }
                }
            }
            data
        }
        LayerOp::DepthwiseConv2d { kernel, stride, padding, depth_multiplier, .. } => {
            let (w, _) = params(model, layer)?;
            let rq = layer_requant(model, layer)?;
            let wzp = def.op.weight_quant().expect("weighted").zero_point as i32;
            let [n, h, wd, c] = dims4(x)?;
            let g = padding.geometry(*kernel, *stride, h, wd);
            let [_, oh, ow, oc] = dims4_of(&out.shape);
            let xzp = x.zero_point() as i32;
            let src = x.data();
            let mut data = Vec::with_capacity(out.len());
            for b in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for o in 0..oc {
                            let ci = o / depth_multiplier;
                            let mut acc = 0i32;
                            for ky in 0..kernel[0] {
                                let Some(iy) = (oy * g.stride_h + ky).checked_sub(g.pad_top).filter(|&v| v < h) else {
                                    continue;
                                };
                                for kx in 0..kernel[1] {
                                    let Some(ix) =
                                        (ox * g.stride_w + kx).checked_sub(g.pad_left).filter(|&v| v < wd)
                                    else {
                                        continue;
                                    };
                                    let xv = src[((b * h + iy) * wd + ix) * c + ci] as i32 - xzp;
                                    let wv = w[(ky * kernel[1] + kx) * oc + o] as i32 - wzp;
                                    acc += xv * wv;
                                }
                            }
                            data.push(requantize(acc, o, &rq));
                        }
                    }
                }
            }
            data
        }
        LayerOp::FullyConnected { units, .. } => {
            let (w, _) = params(model, layer)?;
            let rq = layer_requant(model, layer)?;
            let wzp = def.op.weight_quant().expect("weighted").zero_point as i32;
            let batch = x.shape()[0];
            let f = x.len() / batch;
            let xzp = x.zero_point() as i32;
            let mut data = Vec::with_capacity(batch * units);
            for b in 0..batch {
                let row = &x.data()[b * f..(b + 1) * f];
                for u in 0..*units {
                    let acc = row
                        .iter()
                        .zip(&w[u * f..(u + 1) * f])
                        .map(|(&a, &b)| (a as i32 - xzp) * (b as i32 - wzp))
                        .sum();
                    data.push(requantize(acc, u, &rq));
                }
            }
            data
        }
        LayerOp::MaxPool { pool, stride, padding } | LayerOp::AvgPool { pool, stride, padding } => {
            let avg = matches!(def.op, LayerOp::AvgPool { .. });
            let [n, h, wd, c] = dims4(x)?;
            let g = padding.geometry(*pool, *stride, h, wd);
            let [_, oh, ow, _] = dims4_of(&out.shape);
            let src = x.data();
            let mut data = Vec::with_capacity(out.len());
            for b in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ci in 0..c {
                            let (mut sum, mut count, mut max) = (0u32, 0u32, 0u8);
                            for ky in 0..pool[0] {
                                let Some(iy) = (oy * g.stride_h + ky).checked_sub(g.pad_top).filter(|&v| v < h) else {
                                    continue;
                                };
                                for kx in 0..pool[1] {
                                    let Some(ix) =
                                        (ox * g.stride_w + kx).checked_sub(g.pad_left).filter(|&v| v < wd)
                                    else {
                                        continue;
                                    };
                                    let v = src[((b * h + iy) * wd + ix) * c + ci];
                                    sum += v as u32;
                                    count += 1;
                                    max = max.max(v);
                                }
                            }
                            if count == 0 {
                                return Err(Error::Model(format!("layer '{}': empty pooling window", def.name)));
                            }
                            data.push(if avg { ((sum + count / 2) / count) as u8 } else { max });
                        }
                    }
                }
            }
            data
        }
        LayerOp::Add { activation } => {
            let y = inputs[1];
            let p = AddParams::new(x.scale(), y.scale(), out.scale)?;
            let (lo, hi) = activation.clamp_bounds(out.scale, out.zero_point);
            let (xz, yz) = (x.zero_point() as i32, y.zero_point() as i32);
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&a, &b)| {
                    let a = scale_by((a as i32 - xz) << ADD_LEFT_SHIFT, p.lhs);
                    let b = scale_by((b as i32 - yz) << ADD_LEFT_SHIFT, p.rhs);
                    let r = scale_by(a + b, p.out) + out.zero_point as i32;
                    r.clamp(lo as i32, hi as i32) as u8
                })
                .collect()
        }
        LayerOp::Clamp { min, max } => x.data().iter().map(|&v| v.clamp(*min, *max)).collect(),
    };
    tensor(out, data)
}

fn dims4(t: &QuantTensor) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(t.shape()).map_err(|_| Error::dims(format!("expected NHWC, got {:?}", t.shape())))
}

fn dims4_of(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}
