//! Accelerator models: the Vector-MAC design ([`vm`]) and the systolic array
//! ([`sa`]), plus the components they share.

mod config;
pub mod crossbar;
pub mod input;
pub mod sa;
pub mod vm;

pub use config::{AccelConfig, DesignKind, DriverConfig, SaConfig, VmConfig};
pub use crossbar::{crossbar_collect, Crossbar};
pub use input::{input_handler_route, RouteReport};

use std::rc::Rc;

use serde::Serialize;

use crate::driver::pack::{parse_config, unpack_col_strips, unpack_row_blocks, AccelSetup, BufferKind, PackedBuffer};
use crate::driver::unpack::OutputLayout;
use crate::error::{Error, Result};
use crate::quant::{requantize, RequantParams};
use crate::sim::{ChannelStats, CycleCounters, Payload};

/// Messages exchanged between modeled components.
#[derive(Debug, Clone)]
pub enum Packet {
    /// A packed buffer (index into the run's buffer list) arriving over DMA.
    Buffer(usize),
    /// The input handler finished writing a buffer into on-chip memory.
    Routed(usize),
    /// Global weight buffer bytes released by the scheduler.
    Free(usize),
    /// A weight strip broadcast to a GEMM unit.
    Strip(Rc<vm::WeightStrip>),
    /// One operand entering a systolic-array edge queue.
    Operand(u8),
    /// A completed accumulator tile leaving a compute unit.
    Acc(AccTile),
    /// A post-processed (or raw) tile on its way to the host.
    Out(OutChunk),
}

impl Payload for Packet {
    fn byte_len(&self) -> usize {
        match self {
            Packet::Out(chunk) => chunk.bytes.len(),
            _ => 0,
        }
    }
}

/// Accumulators for one output tile, cropped to the output bounds.
#[derive(Debug, Clone)]
pub struct AccTile {
    pub tile_row: usize,
    pub tile_col: usize,
    /// Output coordinates of the tile's first element.
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    /// K steps accumulated; a tile leaving before all K steps is a spill.
    pub depth_done: usize,
    /// `rows × cols` row-major accumulators.
    pub data: Vec<i32>,
}

impl AccTile {
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone)]
pub struct OutChunk {
    pub tile_row: usize,
    pub tile_col: usize,
    pub bytes: Vec<u8>,
}

/// Timing of one systolic-array tile pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TileRecord {
    pub tile_row: usize,
    pub tile_col: usize,
    pub depth: usize,
    /// Cycle of the first operand injection.
    pub start_cycle: u64,
    /// Cycle of the last accumulate.
    pub end_cycle: u64,
    /// Whether the array waited on an empty queue mid-tile.
    pub stalled: bool,
}

impl TileRecord {
    pub fn latency(&self) -> u64 {
        self.end_cycle - self.start_cycle + 1
    }
}

/// Result of one accelerator invocation.
#[derive(Debug, Clone)]
pub struct AccelRun {
    /// Output stream as received by the host.
    pub stream: Vec<u8>,
    pub layout: OutputLayout,
    pub m: usize,
    pub n: usize,
    pub raw_output: bool,
    /// Total cycles until the output stream drained.
    pub cycles: u64,
    /// Cycle by which every inbound buffer had been delivered.
    pub transfer_cycles: u64,
    /// Cycles from the first MAC to the last completed tile.
    pub compute_window: u64,
    pub counters: CycleCounters,
    pub channels: Vec<ChannelStats>,
    pub tiles: Vec<TileRecord>,
}

/// Decoded operands of a single-K-range invocation.
#[derive(Debug, Clone)]
pub(crate) struct Workload {
    pub setup: AccelSetup,
    /// Depth of this invocation's K-range.
    pub depth: usize,
    /// `m × depth` row-major input bytes.
    pub inputs: Vec<u8>,
    pub weight_tiles: Vec<DecodedWeights>,
    /// Buffer index of the config and input buffers.
    pub config_buffer: usize,
    pub input_buffer: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct DecodedWeights {
    pub buffer: usize,
    pub n_offset: usize,
    pub width: usize,
    /// `depth × width` row-major weight bytes.
    pub data: Vec<u8>,
    pub payload_bytes: usize,
}

impl Workload {
    pub fn decode(buffers: &[PackedBuffer], config: &AccelConfig) -> Result<Self> {
        let mut config_idx = None;
        let mut input_idx = None;
        let mut weights: Vec<usize> = Vec::new();
        for (i, b) in buffers.iter().enumerate() {
            match b.header.kind {
                BufferKind::Config => {
                    if config_idx.replace(i).is_some() {
                        return Err(Error::MalformedBuffer("more than one config buffer".into()));
                    }
                }
                BufferKind::Inputs => {
                    if input_idx.replace(i).is_some() {
                        return Err(Error::MalformedBuffer(
                            "one invocation takes exactly one input buffer".into(),
                        ));
                    }
                }
                BufferKind::Weights => weights.push(i),
            }
            if b.header.payload_bytes as usize != b.payload.len() {
                return Err(Error::MalformedBuffer(format!(
                    "buffer {i}: header says {} payload bytes, found {}",
                    b.header.payload_bytes,
                    b.payload.len()
                )));
            }
            if b.link >= config.bus.num_links {
                return Err(Error::MalformedBuffer(format!(
                    "buffer {i} assigned to link {} of {}",
                    b.link, config.bus.num_links
                )));
            }
        }
        let config_idx = config_idx.ok_or_else(|| Error::MalformedBuffer("missing config buffer".into()))?;
        let input_idx = input_idx.ok_or_else(|| Error::MalformedBuffer("missing input buffer".into()))?;
        if weights.is_empty() {
            return Err(Error::MalformedBuffer("no weight buffers".into()));
        }
        let setup = parse_config(&buffers[config_idx])?;
        let ib = &buffers[input_idx];
        let (m, n) = (setup.m, setup.n);
        if ib.header.m as usize != m || ib.header.n as usize != n {
            return Err(Error::MalformedBuffer(format!(
                "input buffer is for {}x{}, config for {m}x{n}",
                ib.header.m, ib.header.n
            )));
        }
        let depth = ib.header.k as usize;
        if depth == 0 || m == 0 || n == 0 {
            return Err(Error::MalformedBuffer("zero GEMM dimension".into()));
        }
        let inputs = unpack_row_blocks(&ib.payload, m, depth, config.native_rows())?;

        weights.sort_by_key(|&i| buffers[i].header.tile_index);
        let mut weight_tiles = Vec::with_capacity(weights.len());
        let mut n_offset = 0;
        for &i in &weights {
            let h = &buffers[i].header;
            if h.k as usize != depth {
                return Err(Error::MalformedBuffer(format!(
                    "weight tile {} has depth {}, inputs have {depth}",
                    h.tile_index, h.k
                )));
            }
            let width = h.n as usize;
            if n_offset % config.native_cols() != 0 {
                return Err(Error::MalformedBuffer(format!(
                    "weight tile {} starts at column {n_offset}, not a native strip boundary",
                    h.tile_index
                )));
            }
            weight_tiles.push(DecodedWeights {
                buffer: i,
                n_offset,
                width,
                data: unpack_col_strips(&buffers[i].payload, depth, width, config.native_cols())?,
                payload_bytes: buffers[i].payload.len(),
            });
            n_offset += width;
        }
        if n_offset != n {
            return Err(Error::MalformedBuffer(format!(
                "weight tiles cover {n_offset} of {n} columns"
            )));
        }
        Ok(Self {
            setup,
            depth,
            inputs,
            weight_tiles,
            config_buffer: config_idx,
            input_buffer: input_idx,
        })
    }
}

/// Run one invocation on the design selected by `config.kind`.
pub fn run_accelerator(buffers: &[PackedBuffer], config: &AccelConfig) -> Result<AccelRun> {
    config.validate()?;
    match config.kind {
        DesignKind::Vm => vm::run(buffers, config),
        DesignKind::Sa => sa::run(buffers, config),
    }
}

/// Output stream layout of a design.
pub fn output_layout(config: &AccelConfig) -> OutputLayout {
    match config.kind {
        DesignKind::Vm => OutputLayout::Vm {
            tile_rows: config.vm.tile_rows,
            tile_cols: config.vm.tile_cols,
        },
        DesignKind::Sa => OutputLayout::Sa {
            rows: config.sa.rows,
            cols: config.sa.cols,
        },
    }
}

/// Serialize a tile for the output stream: requantized bytes, or raw
/// little-endian accumulators when `raw` is set.
pub(crate) fn encode_tile(tile: &AccTile, requant: &RequantParams, raw: bool, col_major: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(tile.rows * tile.cols * if raw { 4 } else { 1 });
    let mut emit = |r: usize, c: usize| {
        let v = tile.get(r, c);
        if raw {
            out.extend_from_slice(&v.to_le_bytes());
        } else {
            out.push(requantize(v, tile.col0 + c, requant));
        }
    };
    if col_major {
        for c in 0..tile.cols {
            for r in 0..tile.rows {
                emit(r, c);
            }
        }
    } else {
        for r in 0..tile.rows {
            for c in 0..tile.cols {
                emit(r, c);
            }
        }
    }
    out
}

/// First-activity and last-activity cycles of a compute fabric.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Window {
    pub first: Option<u64>,
    pub last: u64,
}

impl Window {
    pub fn touch(&mut self, start: u64, end: u64) {
        self.first = Some(self.first.map_or(start, |f| f.min(start)));
        self.last = self.last.max(end);
    }

    pub fn span(&self) -> u64 {
        self.first.map_or(0, |f| self.last + 1 - f)
    }
}
