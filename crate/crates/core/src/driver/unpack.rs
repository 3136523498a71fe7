use crate::error::{Error, Result};
use crate::quant::AccMatrix;

/// Order in which a design streams output tiles back to the host.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputLayout {
    /// Crossbar order: tiles row-major over the output, each tile row-major.
    Vm { tile_rows: usize, tile_cols: usize },
    /// Column-tile outer, row-tile inner; each tile drained column by column.
    Sa { rows: usize, cols: usize },
}

/// Unpacked result: 8-bit PPU output or raw accumulators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unpacked {
    Quantized(Vec<u8>),
    Raw(AccMatrix),
}

/// Visit output coordinates in stream order. Edge tiles are cropped to the
/// `m × n` output, so the stream holds exactly `m · n` elements.
pub fn stream_order(m: usize, n: usize, layout: OutputLayout, mut visit: impl FnMut(usize, usize)) {
    match layout {
        OutputLayout::Vm { tile_rows, tile_cols } => {
            for tr in 0..m.div_ceil(tile_rows) {
                for tc in 0..n.div_ceil(tile_cols) {
                    for r in tr * tile_rows..((tr + 1) * tile_rows).min(m) {
                        for c in tc * tile_cols..((tc + 1) * tile_cols).min(n) {
                            visit(r, c);
                        }
                    }
                }
            }
        }
        OutputLayout::Sa { rows, cols } => {
            for tc in 0..n.div_ceil(cols) {
                for tr in 0..m.div_ceil(rows) {
                    for c in tc * cols..((tc + 1) * cols).min(n) {
                        for r in tr * rows..((tr + 1) * rows).min(m) {
                            visit(r, c);
                        }
                    }
                }
            }
        }
    }
}

/// Reorder a design-specific output stream into a row-major `m × n` matrix.
/// The element width is inferred from the stream length.
pub fn unpack_outputs(stream: &[u8], m: usize, n: usize, layout: OutputLayout) -> Result<Unpacked> {
    let count = m * n;
    if stream.len() == count {
        let mut out = vec![0u8; count];
        let mut i = 0;
        stream_order(m, n, layout, |r, c| {
            out[r * n + c] = stream[i];
            i += 1;
        });
        Ok(Unpacked::Quantized(out))
    } else if stream.len() == 4 * count {
        let mut out = AccMatrix::zeros(m, n);
        let mut i = 0;
        stream_order(m, n, layout, |r, c| {
            let v = i32::from_le_bytes(stream[4 * i..4 * i + 4].try_into().expect("4 bytes"));
            out.set(r, c, v);
            i += 1;
        });
        Ok(Unpacked::Raw(out))
    } else {
        Err(Error::Stream(format!(
            "{} bytes does not match a {m}x{n} output ({count} or {} bytes)",
            stream.len(),
            4 * count
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_vm_tile_is_identity() {
        let stream: Vec<u8> = (0..16).collect();
        let out = unpack_outputs(&stream, 4, 4, OutputLayout::Vm { tile_rows: 4, tile_cols: 4 }).unwrap();
        assert_eq!(out, Unpacked::Quantized(stream));
    }

    #[test]
    fn sa_tile_is_column_major() {
        let stream: Vec<u8> = (0..6).collect();
        let out = unpack_outputs(&stream, 2, 3, OutputLayout::Sa { rows: 4, cols: 4 }).unwrap();
        assert_eq!(out, Unpacked::Quantized(vec![0, 2, 4, 1, 3, 5]));
    }

    #[test]
    fn vm_8x8_four_tiles() {
        // element value = row * 8 + col, emitted in crossbar order
        let mut stream = Vec::new();
        stream_order(8, 8, OutputLayout::Vm { tile_rows: 4, tile_cols: 4 }, |r, c| stream.push((r * 8 + c) as u8));
        assert_eq!(&stream[..6], &[0, 1, 2, 3, 8, 9]);
        assert_eq!(stream[16], 4);
        let out = unpack_outputs(&stream, 8, 8, OutputLayout::Vm { tile_rows: 4, tile_cols: 4 }).unwrap();
        assert_eq!(out, Unpacked::Quantized((0..64).collect()));
    }

    #[test]
    fn raw_stream_decodes_i32() {
        let vals = [-1i32, 70000, 3, -9];
        let stream: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        match unpack_outputs(&stream, 2, 2, OutputLayout::Vm { tile_rows: 4, tile_cols: 4 }).unwrap() {
            Unpacked::Raw(acc) => assert_eq!(acc.data, vals),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            unpack_outputs(&[0; 5], 2, 2, OutputLayout::Sa { rows: 16, cols: 16 }),
            Err(Error::Stream(_))
        ));
    }
}
