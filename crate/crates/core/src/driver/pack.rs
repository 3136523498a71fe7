//! Host-to-accelerator wire format.
//!
//! Every buffer starts with eight little-endian `u32` header words:
//!
//! | word | meaning |
//! |------|---------|
//! | 0 | magic `0x53454344` |
//! | 1 | kind: 0 = weights, 1 = inputs, 2 = config |
//! | 2 | payload bytes |
//! | 3 | M |
//! | 4 | N (weights: tile width; inputs/config: full N) |
//! | 5 | K (weights/inputs: K-range depth; config: full K) |
//! | 6 | tile index (weights: global tile index; inputs: K-range index) |
//! | 7 | tile count |
//!
//! Weight payloads are native-width column strips, each stored K-major so
//! that one K step of a strip is one contiguous group of bank words. Input
//! payloads are native-height row blocks stored the same way. Padding lanes
//! carry the operand zero point, and payloads are padded to a whole number
//! of bus words.

use serde::Serialize;

use super::plan::TilePlan;
use super::task::GemmTask;
use crate::accel::AccelConfig;
use crate::error::{Error, Result};
use crate::quant::RequantParams;
use crate::sim::Payload;

pub const MAGIC: u32 = 0x5345_4344;
pub const HEADER_WORDS: usize = 8;
pub const HEADER_BYTES: usize = HEADER_WORDS * 4;

/// Fixed words at the start of a config payload, before the bias array.
pub const CONFIG_FIXED_WORDS: usize = 9;

/// Config flag: bypass the PPU and return raw 32-bit accumulators.
pub const FLAG_RAW_OUTPUT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferKind {
    Weights = 0,
    Inputs = 1,
    Config = 2,
}

impl BufferKind {
    fn from_word(w: u32) -> Result<Self> {
        match w {
            0 => Ok(BufferKind::Weights),
            1 => Ok(BufferKind::Inputs),
            2 => Ok(BufferKind::Config),
            other => Err(Error::MalformedBuffer(format!("unknown buffer kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BufferHeader {
    pub kind: BufferKind,
    pub payload_bytes: u32,
    pub m: u32,
    pub n: u32,
    pub k: u32,
    pub tile_index: u32,
    pub tile_count: u32,
}

impl BufferHeader {
    pub fn to_words(&self) -> [u32; HEADER_WORDS] {
        [
            MAGIC,
            self.kind as u32,
            self.payload_bytes,
            self.m,
            self.n,
            self.k,
            self.tile_index,
            self.tile_count,
        ]
    }

    pub fn from_words(words: &[u32]) -> Result<Self> {
        if words.len() < HEADER_WORDS {
            return Err(Error::MalformedBuffer(format!(
                "header has {} words, need {HEADER_WORDS}",
                words.len()
            )));
        }
        if words[0] != MAGIC {
            return Err(Error::MalformedBuffer(format!("bad magic {:#010x}", words[0])));
        }
        let h = Self {
            kind: BufferKind::from_word(words[1])?,
            payload_bytes: words[2],
            m: words[3],
            n: words[4],
            k: words[5],
            tile_index: words[6],
            tile_count: words[7],
        };
        if h.tile_count == 0 || h.tile_index >= h.tile_count {
            return Err(Error::MalformedBuffer(format!(
                "tile index {} of {}",
                h.tile_index, h.tile_count
            )));
        }
        Ok(h)
    }
}

/// Header-tagged operand stream as moved over one DMA link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBuffer {
    pub header: BufferHeader,
    pub payload: Vec<u8>,
    pub link: usize,
}

impl PackedBuffer {
    /// Header words followed by payload, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload.len());
        for w in self.header.to_words() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], link: usize) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::MalformedBuffer(format!("{} bytes is shorter than a header", bytes.len())));
        }
        let words: Vec<u32> = bytes[..HEADER_BYTES]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let header = BufferHeader::from_words(&words)?;
        let payload = bytes[HEADER_BYTES..].to_vec();
        if payload.len() != header.payload_bytes as usize {
            return Err(Error::MalformedBuffer(format!(
                "header says {} payload bytes, found {}",
                header.payload_bytes,
                payload.len()
            )));
        }
        Ok(Self { header, payload, link })
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_BYTES + self.payload.len()
    }
}

impl Payload for PackedBuffer {
    fn byte_len(&self) -> usize {
        self.total_bytes()
    }
}

fn pad_to_bus(payload: &mut Vec<u8>, bus_width: usize, fill: u8) {
    let padded = payload.len().div_ceil(bus_width) * bus_width;
    payload.resize(padded, fill);
}

/// Interleave `rows` × `depth` input bytes (row stride `stride`, starting at
/// column `k0`) into native-height blocks stored K-major.
fn pack_row_blocks(src: &[u8], stride: usize, rows: usize, k0: usize, depth: usize, h: usize, zp: u8) -> Vec<u8> {
    let blocks = rows.div_ceil(h);
    let mut out = Vec::with_capacity(blocks * h * depth);
    for b in 0..blocks {
        for k in 0..depth {
            for r in 0..h {
                let row = b * h + r;
                out.push(if row < rows { src[row * stride + k0 + k] } else { zp });
            }
        }
    }
    out
}

/// Interleave a `depth × width` weight region into native-width strips stored
/// K-major.
#[allow(clippy::too_many_arguments)]
fn pack_col_strips(src: &[u8], stride: usize, k0: usize, depth: usize, n0: usize, width: usize, w: usize, zp: u8) -> Vec<u8> {
    let strips = width.div_ceil(w);
    let mut out = Vec::with_capacity(strips * w * depth);
    for s in 0..strips {
        for k in 0..depth {
            for c in 0..w {
                let col = s * w + c;
                out.push(if col < width { src[(k0 + k) * stride + n0 + col] } else { zp });
            }
        }
    }
    out
}

/// Inverse of the row-block interleave: `rows × depth` row-major bytes.
pub fn unpack_row_blocks(payload: &[u8], rows: usize, depth: usize, h: usize) -> Result<Vec<u8>> {
    let need = rows.div_ceil(h) * h * depth;
    if payload.len() < need {
        return Err(Error::MalformedBuffer(format!(
            "input payload {} bytes, need {need}",
            payload.len()
        )));
    }
    let mut out = vec![0u8; rows * depth];
    for row in 0..rows {
        let (b, r) = (row / h, row % h);
        for k in 0..depth {
            out[row * depth + k] = payload[(b * depth + k) * h + r];
        }
    }
    Ok(out)
}

/// Inverse of the column-strip interleave: `depth × width` row-major bytes.
pub fn unpack_col_strips(payload: &[u8], depth: usize, width: usize, w: usize) -> Result<Vec<u8>> {
    let need = width.div_ceil(w) * w * depth;
    if payload.len() < need {
        return Err(Error::MalformedBuffer(format!(
            "weight payload {} bytes, need {need}",
            payload.len()
        )));
    }
    let mut out = vec![0u8; depth * width];
    for col in 0..width {
        let (s, c) = (col / w, col % w);
        for k in 0..depth {
            out[k * width + col] = payload[(s * depth + k) * w + c];
        }
    }
    Ok(out)
}

/// Assign buffers to DMA links round-robin, starting at `first`.
pub fn assign_links(buffers: &mut [PackedBuffer], num_links: usize, first: usize) {
    for (i, b) in buffers.iter_mut().enumerate() {
        b.link = (first + i) % num_links;
    }
}

/// Reshape a task's operands into the accelerator's format: for each K-range
/// one input buffer followed by that range's weight tiles.
pub fn pack_operands(task: &GemmTask, plan: &TilePlan, config: &AccelConfig) -> Result<Vec<PackedBuffer>> {
    let (m, n, k) = (task.m(), task.n(), task.k());
    if (plan.m, plan.n, plan.k) != (m, n, k) {
        return Err(Error::dims(format!(
            "plan is for {}x{}x{}, task is {m}x{n}x{k}",
            plan.m, plan.n, plan.k
        )));
    }
    let capacity = config.global_weight_buffer_bytes();
    let bus = config.bus.width_bytes as usize;
    let (lzp, rzp) = (task.lhs.zero_point(), task.rhs.zero_point());
    let mut out = Vec::new();
    for (kr_idx, kr) in plan.k_ranges.iter().enumerate() {
        let mut payload = pack_row_blocks(task.lhs.data(), k, m, kr.start, kr.len(), plan.native_rows, lzp);
        pad_to_bus(&mut payload, bus, lzp);
        out.push(PackedBuffer {
            header: BufferHeader {
                kind: BufferKind::Inputs,
                payload_bytes: payload.len() as u32,
                m: m as u32,
                n: n as u32,
                k: kr.len() as u32,
                tile_index: kr_idx as u32,
                tile_count: plan.k_ranges.len() as u32,
            },
            payload,
            link: 0,
        });
        for (tile_idx, tile) in plan.tiles_in_k_range(kr_idx) {
            let footprint = plan.footprint(tile);
            if footprint > capacity {
                return Err(Error::Capacity {
                    buffer: "global weight buffer".into(),
                    needed: footprint,
                    capacity,
                });
            }
            let mut payload = pack_col_strips(
                task.rhs.data(),
                n,
                tile.k_range.start,
                tile.k_range.len(),
                tile.n_range.start,
                tile.n_range.len(),
                plan.native_cols,
                rzp,
            );
            pad_to_bus(&mut payload, bus, rzp);
            out.push(PackedBuffer {
                header: BufferHeader {
                    kind: BufferKind::Weights,
                    payload_bytes: payload.len() as u32,
                    m: m as u32,
                    n: tile.n_range.len() as u32,
                    k: tile.k_range.len() as u32,
                    tile_index: tile_idx as u32,
                    tile_count: plan.tiles.len() as u32,
                },
                payload,
                link: 0,
            });
        }
    }
    assign_links(&mut out, config.bus.num_links, 0);
    Ok(out)
}

/// Decoded contents of a config buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccelSetup {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub lhs_zero_point: u8,
    pub rhs_zero_point: u8,
    pub requant: RequantParams,
    pub raw_output: bool,
}

/// Config buffer: zero points, requantization parameters and bias.
pub fn pack_config(setup: &AccelSetup, bus_width: usize) -> PackedBuffer {
    let p = &setup.requant;
    let mut words: Vec<u32> = vec![
        setup.lhs_zero_point as u32,
        setup.rhs_zero_point as u32,
        p.multiplier as u32,
        p.right_shift,
        p.output_zero_point as u32,
        p.clamp_min as u32,
        p.clamp_max as u32,
        if setup.raw_output { FLAG_RAW_OUTPUT } else { 0 },
        p.bias.len() as u32,
    ];
    words.extend(p.bias.iter().map(|&b| b as u32));
    let mut payload: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
    pad_to_bus(&mut payload, bus_width, 0);
    PackedBuffer {
        header: BufferHeader {
            kind: BufferKind::Config,
            payload_bytes: payload.len() as u32,
            m: setup.m as u32,
            n: setup.n as u32,
            k: setup.k as u32,
            tile_index: 0,
            tile_count: 1,
        },
        payload,
        link: 0,
    }
}

pub fn parse_config(buffer: &PackedBuffer) -> Result<AccelSetup> {
    if buffer.header.kind != BufferKind::Config {
        return Err(Error::MalformedBuffer("expected a config buffer".into()));
    }
    let words: Vec<u32> = buffer
        .payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if words.len() < CONFIG_FIXED_WORDS {
        return Err(Error::MalformedBuffer("config payload too short".into()));
    }
    let n_bias = words[8] as usize;
    if words.len() < CONFIG_FIXED_WORDS + n_bias || n_bias != buffer.header.n as usize {
        return Err(Error::MalformedBuffer(format!(
            "config bias count {n_bias} inconsistent with N={}",
            buffer.header.n
        )));
    }
    let byte = |w: u32, what: &str| -> Result<u8> {
        u8::try_from(w).map_err(|_| Error::MalformedBuffer(format!("{what} {w} out of range")))
    };
    let requant = RequantParams {
        bias: words[CONFIG_FIXED_WORDS..CONFIG_FIXED_WORDS + n_bias]
            .iter()
            .map(|&w| w as i32)
            .collect(),
        multiplier: words[2] as i32,
        right_shift: words[3],
        output_zero_point: byte(words[4], "output zero point")?,
        clamp_min: byte(words[5], "clamp min")?,
        clamp_max: byte(words[6], "clamp max")?,
    };
    requant.validate()?;
    Ok(AccelSetup {
        m: buffer.header.m as usize,
        n: buffer.header.n as usize,
        k: buffer.header.k as usize,
        lhs_zero_point: byte(words[0], "lhs zero point")?,
        rhs_zero_point: byte(words[1], "rhs zero point")?,
        requant,
        raw_output: words[7] & FLAG_RAW_OUTPUT != 0,
    })
}

/// Group a task's buffers into one accelerator invocation per K-range, each
/// led by a config buffer. Multi-range plans request raw accumulators so the
/// host can sum ranges before requantizing.
pub fn pack_invocations(task: &GemmTask, plan: &TilePlan, config: &AccelConfig) -> Result<Vec<Vec<PackedBuffer>>> {
    let operands = pack_operands(task, plan, config)?;
    let raw_output = plan.k_ranges.len() > 1 || !config.ppu_enabled();
    let cfg = pack_config(
        &AccelSetup {
            m: task.m(),
            n: task.n(),
            k: task.k(),
            lhs_zero_point: task.lhs.zero_point(),
            rhs_zero_point: task.rhs.zero_point(),
            requant: task.requant.clone(),
            raw_output,
        },
        config.bus.width_bytes as usize,
    );
    let mut groups: Vec<Vec<PackedBuffer>> = Vec::with_capacity(plan.k_ranges.len());
    for b in operands {
        if b.header.kind == BufferKind::Inputs {
            groups.push(vec![cfg.clone()]);
        }
        groups.last_mut().expect("inputs lead each K-range").push(b);
    }
    for g in &mut groups {
        assign_links(g, config.bus.num_links, 0);
    }
    Ok(groups)
}

/// Reassemble the original `(lhs M×K, rhs K×N)` bytes from operand buffers.
pub fn unpack_operands(buffers: &[PackedBuffer], config: &AccelConfig) -> Result<(Vec<u8>, Vec<u8>)> {
    let h = config.native_rows();
    let w = config.native_cols();
    let mut inputs: Vec<&PackedBuffer> = buffers.iter().filter(|b| b.header.kind == BufferKind::Inputs).collect();
    let mut weights: Vec<&PackedBuffer> = buffers.iter().filter(|b| b.header.kind == BufferKind::Weights).collect();
    inputs.sort_by_key(|b| b.header.tile_index);
    weights.sort_by_key(|b| b.header.tile_index);
    let first = inputs
        .first()
        .ok_or_else(|| Error::MalformedBuffer("no input buffer".into()))?;
    let (m, n) = (first.header.m as usize, first.header.n as usize);
    let k: usize = inputs.iter().map(|b| b.header.k as usize).sum();

    let mut lhs = vec![0u8; m * k];
    let mut k0 = 0;
    for b in &inputs {
        let depth = b.header.k as usize;
        let block = unpack_row_blocks(&b.payload, m, depth, h)?;
        for r in 0..m {
            lhs[r * k + k0..r * k + k0 + depth].copy_from_slice(&block[r * depth..(r + 1) * depth]);
        }
        k0 += depth;
    }

    let mut rhs = vec![0u8; k * n];
    let (mut k0, mut n0) = (0usize, 0usize);
    for b in &weights {
        let (depth, width) = (b.header.k as usize, b.header.n as usize);
        if k0 + depth > k || n0 + width > n {
            return Err(Error::MalformedBuffer(format!(
                "weight tile {} overruns {k}x{n}",
                b.header.tile_index
            )));
        }
        let tile = unpack_col_strips(&b.payload, depth, width, w)?;
        for kk in 0..depth {
            rhs[(k0 + kk) * n + n0..(k0 + kk) * n + n0 + width]
                .copy_from_slice(&tile[kk * width..(kk + 1) * width]);
        }
        n0 += width;
        if n0 == n {
            n0 = 0;
            k0 += depth;
        }
    }
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::plan::plan_weight_tiles;
    use crate::quant::{QuantTensor, RequantParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn task(m: usize, n: usize, k: usize, seed: u64) -> GemmTask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lhs = QuantTensor::new((0..m * k).map(|_| rng.gen()).collect(), vec![m, k], 0.1, rng.gen()).unwrap();
        let rhs = QuantTensor::new((0..k * n).map(|_| rng.gen()).collect(), vec![k, n], 0.1, rng.gen()).unwrap();
        let rq = RequantParams::from_scale(0.01, n, 3).unwrap();
        GemmTask::new(lhs, rhs, rq, 0.2).unwrap()
    }

    #[test]
    fn smallest_case_one_weight_one_input() {
        let c = AccelConfig::vm();
        let t = task(4, 4, 4, 1);
        let plan = plan_weight_tiles(4, 4, 4, &c).unwrap();
        let bufs = pack_operands(&t, &plan, &c).unwrap();
        assert_eq!(bufs.len(), 2);
        assert_eq!(bufs[0].header.kind, BufferKind::Inputs);
        assert_eq!(bufs[1].header.kind, BufferKind::Weights);
        assert!(bufs.iter().all(|b| b.header.tile_count == 1));
        assert_eq!((bufs[0].link, bufs[1].link), (0, 1));
        assert_eq!(bufs[1].payload.len(), 16);
    }

    #[test]
    fn two_weight_buffers_for_n32() {
        let mut c = AccelConfig::vm();
        c.vm.global_weight_buffer_bytes = 16 * 8 + 8;
        let t = task(4, 32, 8, 2);
        let plan = plan_weight_tiles(4, 32, 8, &c).unwrap();
        let bufs = pack_operands(&t, &plan, &c).unwrap();
        let w: Vec<_> = bufs.iter().filter(|b| b.header.kind == BufferKind::Weights).collect();
        assert_eq!(w.len(), 2);
        assert_eq!(plan.tiles[0].n_range, 0..16);
        assert_eq!(plan.tiles[1].n_range, 16..32);
        assert!(w.iter().all(|b| b.header.n == 16 && b.header.tile_count == 2));
    }

    #[test]
    fn header_wire_format_is_bit_exact() {
        let c = AccelConfig::vm();
        let t = task(4, 4, 4, 3);
        let plan = plan_weight_tiles(4, 4, 4, &c).unwrap();
        let b = &pack_operands(&t, &plan, &c).unwrap()[1];
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..4], &[0x44, 0x43, 0x45, 0x53]);
        assert_eq!(&bytes[4..8], &0u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &16u32.to_le_bytes());
        assert_eq!(PackedBuffer::from_bytes(&bytes, 1).unwrap(), *b);
    }

    #[test]
    fn malformed_headers_rejected() {
        let mut bytes = vec![0u8; 32];
        assert!(PackedBuffer::from_bytes(&bytes, 0).is_err());
        bytes[..4].copy_from_slice(&MAGIC.to_le_bytes());
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        bytes[28..32].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(PackedBuffer::from_bytes(&bytes, 0), Err(Error::MalformedBuffer(_))));
    }

    #[test]
    fn payloads_padded_with_zero_point() {
        let c = AccelConfig::vm();
        let t = task(3, 5, 3, 4);
        let plan = plan_weight_tiles(3, 5, 3, &c).unwrap();
        let bufs = pack_operands(&t, &plan, &c).unwrap();
        for b in &bufs {
            assert_eq!(b.payload.len() % 8, 0);
        }
        // weights: 2 strips x 3 deep x 4 wide = 24 bytes; lanes 5..8 are padding
        let wb = &bufs[1];
        assert_eq!(wb.payload.len(), 24);
        let rzp = t.rhs.zero_point();
        for k in 0..3 {
            for c in 1..4 {
                assert_eq!(wb.payload[(3 + k) * 4 + c], rzp);
            }
        }
    }

    #[test]
    fn config_round_trip() {
        let mut rq = RequantParams::from_scale(0.013, 3, 9).unwrap();
        rq.bias = vec![-5, 0, 70000];
        rq.clamp_min = 9;
        let setup = AccelSetup {
            m: 7,
            n: 3,
            k: 11,
            lhs_zero_point: 12,
            rhs_zero_point: 250,
            requant: rq,
            raw_output: true,
        };
        let b = pack_config(&setup, 8);
        assert_eq!(parse_config(&b).unwrap(), setup);
    }

    proptest! {
        #[test]
        fn unpack_inverts_pack(m in 1usize..40, n in 1usize..40, k in 1usize..90,
                               cap in 64usize..1024, seed: u64, sa in any::<bool>()) {
            let mut c = if sa { AccelConfig::sa_square(8) } else { AccelConfig::vm() };
            c.vm.global_weight_buffer_bytes = cap;
            c.sa.global_weight_buffer_bytes = cap;
            let t = task(m, n, k, seed);
            let plan = plan_weight_tiles(m, n, k, &c).unwrap();
            let bufs = pack_operands(&t, &plan, &c).unwrap();
            let (lhs, rhs) = unpack_operands(&bufs, &c).unwrap();
            prop_assert_eq!(&lhs[..], t.lhs.data());
            prop_assert_eq!(&rhs[..], t.rhs.data());
        }
    }
}
