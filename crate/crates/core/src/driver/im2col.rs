use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantTensor;

/// Spatial geometry of a 2-D convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: usize, padding: usize) -> Self {
        Self {
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride,
            stride_w: stride,
            pad_top: padding,
            pad_left: padding,
            pad_bottom: padding,
            pad_right: padding,
        }
    }

    /// TensorFlow-style SAME padding for the given input size.
    pub fn same(kernel: (usize, usize), stride: usize, in_h: usize, in_w: usize) -> Self {
        let pad = |k: usize, s: usize, n: usize| {
            let out = n.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(n);
            (total / 2, total - total / 2)
        };
        let (pt, pb) = pad(kernel.0, stride, in_h);
        let (pl, pr) = pad(kernel.1, stride, in_w);
        Self {
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride,
            stride_w: stride,
            pad_top: pt,
            pad_left: pl,
            pad_bottom: pb,
            pad_right: pr,
        }
    }

    /// Output height and width, or an error if the window does not fit.
    pub fn output_dims(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::param("kernel and stride must be positive"));
        }
        let ph = in_h + self.pad_top + self.pad_bottom;
        let pw = in_w + self.pad_left + self.pad_right;
        if self.kernel_h > ph || self.kernel_w > pw {
            return Err(Error::dims(format!(
                "kernel {}x{} larger than padded input {ph}x{pw}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride_h + 1,
            (pw - self.kernel_w) / self.stride_w + 1,
        ))
    }
}

/// Unroll receptive fields of an NHWC tensor into an `M×K` patch matrix with
/// `M = N·H_out·W_out` and `K = kh·kw·C`, ordered `(kh, kw, c)`. Padding
/// positions take the input zero point.
pub fn im2col(input: &QuantTensor, geom: &ConvGeometry) -> Result<QuantTensor> {
    let [batch, in_h, in_w, ch] = nhwc(input)?;
    let (out_h, out_w) = geom.output_dims(in_h, in_w)?;
    let k = geom.kernel_h * geom.kernel_w * ch;
    let m = batch * out_h * out_w;
    let zp = input.zero_point();
    let src = input.data();
    let mut data = vec![zp; m * k];
    let mut row = 0;
    for b in 0..batch {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let dst = &mut data[row * k..(row + 1) * k];
                for ky in 0..geom.kernel_h {
                    let iy = (oy * geom.stride_h + ky) as isize - geom.pad_top as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel_w {
                        let ix = (ox * geom.stride_w + kx) as isize - geom.pad_left as isize;
                        if ix < 0 || ix >= in_w as isize {
                            continue;
                        }
                        let s = ((b * in_h + iy as usize) * in_w + ix as usize) * ch;
                        let d = (ky * geom.kernel_w + kx) * ch;
                        dst[d..d + ch].copy_from_slice(&src[s..s + ch]);
                    }
                }
                row += 1;
            }
        }
    }
    QuantTensor::new(data, vec![m, k], input.scale(), zp)
}

pub(crate) fn nhwc(t: &QuantTensor) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, h, w, c] => Ok([n, h, w, c]),
        other => Err(Error::dims(format!("expected NHWC tensor, got shape {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{reference_gemm, AccMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pointwise_kernel_is_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<u8> = (0..2 * 3 * 3 * 5).map(|_| rng.gen()).collect();
        let t = QuantTensor::new(data.clone(), vec![2, 3, 3, 5], 0.1, 7).unwrap();
        let p = im2col(&t, &ConvGeometry::new((1, 1), 1, 0)).unwrap();
        assert_eq!(p.shape(), &[18, 5]);
        assert_eq!(p.data(), &data[..]);
    }

    #[test]
    fn three_by_three_on_4x4_hand_enumerated() {
        let data: Vec<u8> = (0..16).collect();
        let t = QuantTensor::new(data, vec![1, 4, 4, 1], 1.0, 0).unwrap();
        let p = im2col(&t, &ConvGeometry::new((3, 3), 1, 0)).unwrap();
        assert_eq!(p.shape(), &[4, 9]);
        let expected: [[u8; 9]; 4] = [
            [0, 1, 2, 4, 5, 6, 8, 9, 10],
            [1, 2, 3, 5, 6, 7, 9, 10, 11],
            [4, 5, 6, 8, 9, 10, 12, 13, 14],
            [5, 6, 7, 9, 10, 11, 13, 14, 15],
        ];
        assert_eq!(p.data(), expected.concat().as_slice());
    }

    #[test]
    fn padding_uses_zero_point() {
        let t = QuantTensor::filled(vec![1, 2, 2, 1], 9, 1.0, 42).unwrap();
        let p = im2col(&t, &ConvGeometry::new((3, 3), 1, 1)).unwrap();
        assert_eq!(p.shape(), &[4, 9]);
        // top-left output: only the bottom-right 2x2 of its window is inside
        assert_eq!(p.data()[..9], [42, 42, 42, 42, 9, 9, 42, 9, 9]);
    }

    #[test]
    fn kernel_larger_than_input() {
        let t = QuantTensor::filled(vec![1, 2, 2, 1], 0, 1.0, 0).unwrap();
        assert!(im2col(&t, &ConvGeometry::new((3, 3), 1, 0)).is_err());
    }

    #[test]
    fn same_padding_geometry() {
        let g = ConvGeometry::same((3, 3), 2, 5, 5);
        assert_eq!(g.output_dims(5, 5).unwrap(), (3, 3));
        assert_eq!((g.pad_top, g.pad_bottom), (1, 1));
        let g = ConvGeometry::same((3, 3), 2, 4, 4);
        assert_eq!(g.output_dims(4, 4).unwrap(), (2, 2));
        assert_eq!((g.pad_top, g.pad_bottom), (0, 1));
    }

    /// Seven-loop direct convolution in wide integers.
    fn direct_conv(
        input: &QuantTensor,
        filters: &[u8],
        fzp: i64,
        out_c: usize,
        g: &ConvGeometry,
    ) -> AccMatrix {
        let [n, h, w, c] = nhwc(input).unwrap();
        let (oh, ow) = g.output_dims(h, w).unwrap();
        let izp = input.zero_point() as i64;
        let mut out = vec![0i32; n * oh * ow * out_c];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..out_c {
                        let mut acc = 0i64;
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                for ic in 0..c {
                                    let iy = (oy * g.stride_h + ky) as isize - g.pad_top as isize;
                                    let ix = (ox * g.stride_w + kx) as isize - g.pad_left as isize;
                                    let x = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        izp
                                    } else {
                                        input.data()[((b * h + iy as usize) * w + ix as usize) * c + ic] as i64
                                    };
                                    let f = filters[((oc * g.kernel_h + ky) * g.kernel_w + kx) * c + ic] as i64;
                                    acc += (x - izp) * (f - fzp);
                                }
                            }
                        }
                        out[((b * oh + oy) * ow + ox) * out_c + oc] = acc as i32;
                    }
                }
            }
        }
        AccMatrix::from_vec(n * oh * ow, out_c, out).unwrap()
    }

    #[test]
    fn im2col_gemm_equals_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(533);
        let input = QuantTensor::new((0..75).map(|_| rng.gen()).collect(), vec![1, 5, 5, 3], 0.05, 117)
            .unwrap();
        let filters: Vec<u8> = (0..4 * 27).map(|_| rng.gen()).collect();
        for g in [ConvGeometry::new((3, 3), 1, 0), ConvGeometry::new((3, 3), 2, 1)] {
            let patches = im2col(&input, &g).unwrap();
            // OHWI filters -> (kh·kw·C) × O weight matrix
            let mut w = vec![0u8; 27 * 4];
            for oc in 0..4 {
                for kk in 0..27 {
                    w[kk * 4 + oc] = filters[oc * 27 + kk];
                }
            }
            let rhs = QuantTensor::new(w, vec![27, 4], 0.02, 131).unwrap();
            let acc = reference_gemm(&patches, &rhs).unwrap();
            assert_eq!(acc, direct_conv(&input, &filters, 131, 4, &g));
        }
    }
}
