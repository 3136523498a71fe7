use crate::error::{Error, Result};
use crate::quant::{reference_gemm, requantize_matrix, QuantTensor, RequantParams};

/// One offloaded GEMM call: `lhs` (inputs, M×K) times `rhs` (weights, K×N),
/// requantized per output column.
#[derive(Debug, Clone, PartialEq)]
pub struct GemmTask {
    pub lhs: QuantTensor,
    pub rhs: QuantTensor,
    pub requant: RequantParams,
    /// Scale attached to the 8-bit output tensor.
    pub output_scale: f64,
}

impl GemmTask {
    pub fn new(lhs: QuantTensor, rhs: QuantTensor, requant: RequantParams, output_scale: f64) -> Result<Self> {
        let (_, k) = lhs.matrix_dims()?;
        let (k2, n) = rhs.matrix_dims()?;
        if k != k2 {
            return Err(Error::dims(format!("task lhs K={k} but rhs K={k2}")));
        }
        if requant.bias.len() != n {
            return Err(Error::dims(format!(
                "bias length {} != N={n}",
                requant.bias.len()
            )));
        }
        requant.validate()?;
        Ok(Self {
            lhs,
            rhs,
            requant,
            output_scale,
        })
    }

    pub fn m(&self) -> usize {
        self.lhs.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.lhs.shape()[1]
    }

    pub fn n(&self) -> usize {
        self.rhs.shape()[1]
    }

    /// Rows `[start, end)` of the input operand as a new task.
    pub fn row_slice(&self, start: usize, end: usize) -> Result<Self> {
        let k = self.k();
        let data = self.lhs.data()[start * k..end * k].to_vec();
        let lhs = QuantTensor::new(data, vec![end - start, k], self.lhs.scale(), self.lhs.zero_point())?;
        Ok(Self {
            lhs,
            rhs: self.rhs.clone(),
            requant: self.requant.clone(),
            output_scale: self.output_scale,
        })
    }

    /// CPU oracle: exact GEMM followed by requantization.
    pub fn reference_output(&self) -> Result<QuantTensor> {
        let acc = reference_gemm(&self.lhs, &self.rhs)?;
        requantize_matrix(&acc, &self.requant, self.output_scale)
    }
}
