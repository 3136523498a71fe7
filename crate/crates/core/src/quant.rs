//! 8-bit affine-quantized tensors, the exact int32 GEMM oracle and the
//! fixed-point requantization pipeline that the post-processing units
//! implement.
//!
//! Every accelerator model and the CPU reference path call into the
//! arithmetic here, so all backends agree bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest inner dimension for which an int32 accumulator cannot overflow:
/// each zero-point-adjusted product is at most `255^2` in magnitude, so
/// `K * 255^2` must stay below `2^31`.
pub const MAX_EXACT_DEPTH: usize = (i32::MAX as usize) / (255 * 255);

/// An 8-bit unsigned tensor with per-tensor affine quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    data: Vec<u8>,
    shape: Vec<usize>,
    scale: f64,
    zero_point: u8,
}

impl QuantTensor {
    pub fn new(data: Vec<u8>, shape: Vec<usize>, scale: f64, zero_point: u8) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() {
            return Err(Error::InvalidTensor("empty shape".into()));
        }
        if data.len() != expected {
            return Err(Error::InvalidTensor(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                expected
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidTensor(format!("scale must be > 0, got {scale}")));
        }
        Ok(Self {
            data,
            shape,
            scale,
            zero_point,
        })
    }

    /// A tensor with every element equal to `value`.
    pub fn filled(shape: Vec<usize>, value: u8, scale: f64, zero_point: u8) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(vec![value; len], shape, scale, zero_point)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> u8 {
        self.zero_point
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same bytes and quantization, different shape.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(self.data.clone(), shape, self.scale, self.zero_point)
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [rows, cols] => Ok((*rows, *cols)),
            other => Err(Error::dims(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// Element `(row, col)` of a rank-2 tensor.
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.shape[1] + col]
    }
}

/// Bias, fixed-point scale and activation clamp applied to one GEMM output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequantParams {
    pub bias: Vec<i32>,
    pub multiplier: i32,
    pub right_shift: u32,
    pub output_zero_point: u8,
    pub clamp_min: u8,
    pub clamp_max: u8,
}

impl RequantParams {
    /// Parameters for `real_scale` with no bias and a full-range clamp.
    pub fn from_scale(real_scale: f64, channels: usize, output_zero_point: u8) -> Result<Self> {
        let (multiplier, right_shift) = quantize_multiplier(real_scale)?;
        Ok(Self {
            bias: vec![0; channels],
            multiplier,
            right_shift,
            output_zero_point,
            clamp_min: 0,
            clamp_max: 255,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clamp_min <= self.output_zero_point && self.output_zero_point <= self.clamp_max) {
            return Err(Error::param(format!(
                "clamp range [{}, {}] must contain output zero point {}",
                self.clamp_min, self.clamp_max, self.output_zero_point
            )));
        }
        if self.multiplier != 0 && self.multiplier < (1 << 30) {
            return Err(Error::param(format!(
                "multiplier {} outside [2^30, 2^31)",
                self.multiplier
            )));
        }
        if self.right_shift > 62 {
            return Err(Error::param(format!("right shift {} too large", self.right_shift)));
        }
        Ok(())
    }

    /// The real-valued scale encoded by `multiplier` and `right_shift`.
    pub fn real_scale(&self) -> f64 {
        decode_multiplier(self.multiplier, self.right_shift)
    }
}

/// Activation functions expressible as an output clamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Relu6,
}

impl Activation {
    /// Quantized clamp bounds for an output with the given scale and zero point.
    pub fn clamp_bounds(self, scale: f64, zero_point: u8) -> (u8, u8) {
        match self {
            Activation::None => (0, 255),
            Activation::Relu => (zero_point, 255),
            Activation::Relu6 => {
                let six = zero_point as f64 + (6.0 / scale).round();
                (zero_point, six.clamp(zero_point as f64, 255.0) as u8)
            }
        }
    }
}

/// Row-major matrix of signed 32-bit accumulators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl AccMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<i32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(format!(
                "accumulator data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: i32) {
        self.data[row * self.cols + col] = value;
    }
}

/// Exact zero-point-adjusted integer GEMM of `lhs` (M×K) and `rhs` (K×N).
pub fn reference_gemm(lhs: &QuantTensor, rhs: &QuantTensor) -> Result<AccMatrix> {
    let (m, k) = lhs.matrix_dims()?;
    let (k2, n) = rhs.matrix_dims()?;
    if k != k2 {
        return Err(Error::dims(format!(
            "inner dimensions differ: lhs {m}x{k}, rhs {k2}x{n}"
        )));
    }
    if k > MAX_EXACT_DEPTH {
        return Err(Error::dims(format!(
            "inner dimension {k} exceeds exact int32 range ({MAX_EXACT_DEPTH})"
        )));
    }
    let lzp = lhs.zero_point() as i32;
    let rzp = rhs.zero_point() as i32;
    let mut out = AccMatrix::zeros(m, n);
    let mut rhs_adj = vec![0i32; k * n];
    for (dst, &v) in rhs_adj.iter_mut().zip(rhs.data()) {
        *dst = v as i32 - rzp;
    }
    for i in 0..m {
        let row = &lhs.data()[i * k..(i + 1) * k];
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (kk, &a) in row.iter().enumerate() {
            let a = a as i32 - lzp;
            if a == 0 {
                continue;
            }
            let w = &rhs_adj[kk * n..(kk + 1) * n];
            for (o, &b) in out_row.iter_mut().zip(w) {
                *o += a * b;
            }
        }
    }
    Ok(out)
}

/// High 32 bits of `2 * a * b`, saturating the single overflowing case.
#[inline]
pub fn saturating_doubling_high_mul(a: i32, b: i32) -> i32 {
    if a == i32::MIN && b == i32::MIN {
        return i32::MAX;
    }
    ((2 * a as i64 * b as i64) >> 32) as i32
}

/// Divide by `2^shift`, rounding half away from zero.
#[inline]
pub fn rounding_right_shift(x: i32, shift: u32) -> i32 {
    if shift == 0 {
        return x;
    }
    let x = x as i64;
    let half = 1i64 << (shift - 1);
    let r = if x >= 0 {
        (x + half) >> shift
    } else {
        -((-x + half) >> shift)
    };
    r as i32
}

/// Apply bias, fixed-point scale, zero point and clamp to one accumulator.
#[inline]
pub fn requantize(acc: i32, channel: usize, p: &RequantParams) -> u8 {
    let biased = acc.saturating_add(p.bias[channel]);
    let scaled = rounding_right_shift(saturating_doubling_high_mul(biased, p.multiplier), p.right_shift);
    let shifted = scaled as i64 + p.output_zero_point as i64;
    shifted.clamp(p.clamp_min as i64, p.clamp_max as i64) as u8
}

/// Elementwise [`requantize`] with channel = column.
pub fn requantize_matrix(acc: &AccMatrix, p: &RequantParams, scale: f64) -> Result<QuantTensor> {
    if p.bias.len() != acc.cols {
        return Err(Error::dims(format!(
            "bias length {} != output channels {}",
            p.bias.len(),
            acc.cols
        )));
    }
    let data = acc
        .data
        .iter()
        .enumerate()
        .map(|(idx, &v)| requantize(v, idx % acc.cols, p))
        .collect();
    QuantTensor::new(data, vec![acc.rows, acc.cols], scale, p.output_zero_point)
}

/// Encode `real_scale` in (0, 1) as a Q0.31 multiplier in `[2^30, 2^31)` and a
/// non-negative right shift.
pub fn quantize_multiplier(real_scale: f64) -> Result<(i32, u32)> {
    if !(real_scale > 0.0 && real_scale < 1.0) {
        return Err(Error::param(format!(
            "real scale {real_scale} outside (0, 1)"
        )));
    }
    let mut shift = 0u32;
    let mut q = real_scale;
    while q < 0.5 {
        q *= 2.0;
        shift += 1;
    }
    if shift > 62 {
        return Err(Error::param(format!("real scale {real_scale} too small to encode")));
    }
    let mut m = (q * (1u64 << 31) as f64).round() as i64;
    if m == 1i64 << 31 {
        if shift == 0 {
            m = i32::MAX as i64;
        } else {
            m /= 2;
            shift -= 1;
        }
    }
    Ok((m as i32, shift))
}

/// `multiplier * 2^(-31 - right_shift)`.
pub fn decode_multiplier(multiplier: i32, right_shift: u32) -> f64 {
    multiplier as f64 / 2f64.powi(31 + right_shift as i32)
}
