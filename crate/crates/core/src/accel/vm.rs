//! Vector-MAC design: an input handler, a broadcast scheduler, four GEMM units
//! computing 4×4 output tiles, one PPU per unit and an output crossbar.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use super::input::{check_capacities, InputHandler};
use super::{encode_tile, output_layout, AccTile, AccelConfig, AccelRun, Crossbar, OutChunk, Packet, Window, Workload};
use crate::driver::pack::PackedBuffer;
use crate::error::{Error, Result};
use crate::quant::RequantParams;
use crate::sim::{ChannelId, Ctx, DmaIn, DmaOut, Engine, Process, SimError, Step};

const TILE: usize = 4;

/// A 4-column weight strip, zero-point adjusted, as held in a unit's local
/// weight tile buffer. Padded columns are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightStrip {
    /// Global column-tile index.
    pub tile_col: usize,
    pub col0: usize,
    /// Valid columns (4 except at the right edge).
    pub cols: usize,
    pub depth: usize,
    /// `depth × 4`, K-major.
    pub data: Vec<i32>,
}

/// Reduce partial products pairwise, as a binary adder tree does.
fn adder_tree(products: &mut [i32]) -> i32 {
    let mut len = products.len();
    while len > 1 {
        let half = len.div_ceil(2);
        for i in 0..len / 2 {
            products[i] = products[2 * i] + products[2 * i + 1];
        }
        if len % 2 == 1 {
            products[len / 2] = products[len - 1];
        }
        len = half;
    }
    products.first().copied().unwrap_or(0)
}

/// One 4×4 output tile of a GEMM unit. `strip` is `depth × 4` K-major and
/// `block` is `4 × depth` row-major, both zero-point adjusted. Each output
/// sums `macs_per_output` products per cycle through the adder tree.
/// Returns the tile and its unstalled cycle count.
pub fn gemm_unit_compute(
    strip: &[i32],
    block: &[i32],
    depth: usize,
    macs_per_output: usize,
    adder_tree_latency: u64,
) -> Result<([i32; 16], u64)> {
    if depth == 0 {
        return Err(Error::dims("GEMM unit depth must be positive"));
    }
    if macs_per_output == 0 {
        return Err(Error::param("macs_per_output must be positive"));
    }
    if strip.len() != depth * TILE || block.len() != depth * TILE {
        return Err(Error::dims(format!(
            "unit operands {} and {} do not match depth {depth}",
            strip.len(),
            block.len()
        )));
    }
    let mut tile = [0i32; 16];
    let mut products = vec![0i32; macs_per_output];
    for r in 0..TILE {
        for c in 0..TILE {
            let mut acc = 0i32;
            for k0 in (0..depth).step_by(macs_per_output) {
                let lanes = macs_per_output.min(depth - k0);
                for (lane, p) in products.iter_mut().enumerate().take(lanes) {
                    let k = k0 + lane;
                    *p = block[r * depth + k] * strip[k * TILE + c];
                }
                acc += adder_tree(&mut products[..lanes]);
            }
            tile[r * TILE + c] = acc;
        }
    }
    let cycles = depth.div_ceil(macs_per_output) as u64 + adder_tree_latency;
    Ok((tile, cycles))
}

/// Elementwise requantization of a tile, row-major.
pub fn ppu_process(tile: &AccTile, p: &RequantParams) -> Vec<u8> {
    encode_tile(tile, p, false, false)
}

/// The broadcast schedule: weight strips in the outer loop, each paired with
/// every input block. Returns `(strip, block)` pairs grouped by unit.
pub fn schedule_tiles(strips: usize, blocks: usize, units: usize) -> Vec<Vec<(usize, usize)>> {
    let mut per_unit = vec![Vec::new(); units];
    for s in 0..strips {
        for b in 0..blocks {
            per_unit[b % units].push((s, b));
        }
    }
    per_unit
}

fn adjusted_strips(work: &Workload) -> Vec<(usize, Rc<WeightStrip>)> {
    let depth = work.depth;
    let zp = i32::from(work.setup.rhs_zero_point);
    let mut out = Vec::new();
    for (rank, w) in work.weight_tiles.iter().enumerate() {
        for s in 0..w.width.div_ceil(TILE) {
            let local0 = s * TILE;
            let cols = TILE.min(w.width - local0);
            let mut data = vec![0i32; depth * TILE];
            for k in 0..depth {
                for c in 0..cols {
                    data[k * TILE + c] = i32::from(w.data[k * w.width + local0 + c]) - zp;
                }
            }
            let col0 = w.n_offset + local0;
            out.push((
                rank,
                Rc::new(WeightStrip {
                    tile_col: col0 / TILE,
                    col0,
                    cols,
                    depth,
                    data,
                }),
            ));
        }
    }
    out
}

fn adjusted_block(work: &Workload, block: usize) -> Vec<i32> {
    let (m, depth) = (work.setup.m, work.depth);
    let zp = i32::from(work.setup.lhs_zero_point);
    let mut data = vec![0i32; TILE * depth];
    for r in 0..TILE {
        let row = block * TILE + r;
        if row < m {
            for k in 0..depth {
                data[r * depth + k] = i32::from(work.inputs[row * depth + k]) - zp;
            }
        }
    }
    data
}

struct Scheduler {
    routed: ChannelId,
    free: ChannelId,
    units: Vec<ChannelId>,
    strips: Vec<(usize, Rc<WeightStrip>)>,
    tile_bytes: Vec<usize>,
    rank_of_buffer: BTreeMap<usize, usize>,
    config_buffer: usize,
    input_buffer: usize,
    have_config: bool,
    have_input: bool,
    tile_routed: Vec<bool>,
    next: usize,
    reading: Option<u64>,
    delivering: bool,
    delivered: Vec<bool>,
    read_words: u64,
    read_cycles: u64,
    readers: u64,
}

impl Process<Packet> for Scheduler {
    fn name(&self) -> &str {
        "scheduler"
    }

    fn step(&mut self, cx: &mut Ctx<'_, Packet>) -> Result<Step, SimError> {
        while !cx.is_empty(self.routed) {
            if let Some(Packet::Routed(b)) = cx.try_recv(self.routed) {
                if b == self.config_buffer {
                    self.have_config = true;
                } else if b == self.input_buffer {
                    self.have_input = true;
                } else if let Some(&rank) = self.rank_of_buffer.get(&b) {
                    self.tile_routed[rank] = true;
                }
            }
        }
        if self.next == self.strips.len() {
            return Ok(Step::Done);
        }
        if !(self.have_config && self.have_input) {
            return Ok(Step::Blocked(self.routed));
        }
        let (rank, strip) = self.strips[self.next].clone();
        let mut worked = false;
        if !self.delivering {
            if self.reading.is_none() {
                if !self.tile_routed[rank] {
                    return Ok(Step::Blocked(self.routed));
                }
                cx.counters().global_weight_buffer_reads += self.read_words * self.readers;
                self.reading = Some(self.read_cycles);
            }
            let left = self.reading.expect("reading") - 1;
            if left > 0 {
                self.reading = Some(left);
                return Ok(Step::Busy);
            }
            self.reading = None;
            self.delivering = true;
            self.delivered.iter_mut().for_each(|d| *d = false);
            worked = true;
        }
        for (u, &ch) in self.units.iter().enumerate() {
            if !self.delivered[u] && cx.try_send(ch, Packet::Strip(strip.clone())).is_ok() {
                self.delivered[u] = true;
            }
        }
        if let Some(u) = self.delivered.iter().position(|d| !d) {
            return Ok(if worked { Step::Busy } else { Step::Blocked(self.units[u]) });
        }
        self.delivering = false;
        self.next += 1;
        let tile_done = self.strips.get(self.next).is_none_or(|(r, _)| *r != rank);
        if tile_done && cx.try_send(self.free, Packet::Free(self.tile_bytes[rank])).is_err() {
            return Err(SimError::Fault {
                process: "scheduler".into(),
                message: "weight release channel full".into(),
            });
        }
        Ok(Step::Busy)
    }
}

struct GemmUnit {
    name: String,
    input: ChannelId,
    output: ChannelId,
    blocks: Vec<(usize, Vec<i32>)>,
    strips_expected: usize,
    strips_seen: usize,
    strip: Option<Rc<WeightStrip>>,
    cursor: usize,
    remaining: u64,
    started: u64,
    pending: Option<AccTile>,
    m: usize,
    depth: usize,
    macs_per_output: usize,
    tree_latency: u64,
    window: Rc<RefCell<Window>>,
}

impl GemmUnit {
    fn finish_tile(&mut self, cx: &mut Ctx<'_, Packet>) -> Result<Step, SimError> {
        let strip = self.strip.clone().expect("active strip");
        let (block, data) = &self.blocks[self.cursor];
        let (full, _) = gemm_unit_compute(&strip.data, data, self.depth, self.macs_per_output, self.tree_latency)
            .map_err(|e| SimError::Fault {
                process: self.name.clone(),
                message: e.to_string(),
            })?;
        self.window.borrow_mut().touch(self.started, cx.cycle());
        let rows = TILE.min(self.m - block * TILE);
        let mut cropped = Vec::with_capacity(rows * strip.cols);
        for r in 0..rows {
            cropped.extend_from_slice(&full[r * TILE..r * TILE + strip.cols]);
        }
        let tile = AccTile {
            tile_row: *block,
            tile_col: strip.tile_col,
            row0: block * TILE,
            col0: strip.col0,
            rows,
            cols: strip.cols,
            depth_done: self.depth,
            data: cropped,
        };
        self.send(cx, tile)
    }

    fn send(&mut self, cx: &mut Ctx<'_, Packet>, tile: AccTile) -> Result<Step, SimError> {
        match cx.try_send(self.output, Packet::Acc(tile)) {
            Ok(()) => {
                self.cursor += 1;
                if self.cursor == self.blocks.len() {
                    self.strip = None;
                }
                Ok(Step::Busy)
            }
            Err(Packet::Acc(tile)) => {
                self.pending = Some(tile);
                Ok(Step::Blocked(self.output))
            }
            Err(_) => unreachable!("sent an accumulator tile"),
        }
    }
}

impl Process<Packet> for GemmUnit {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, cx: &mut Ctx<'_, Packet>) -> Result<Step, SimError> {
        if let Some(tile) = self.pending.take() {
            return self.send(cx, tile);
        }
        if self.remaining > 0 {
            self.remaining -= 1;
            return if self.remaining == 0 {
                self.finish_tile(cx)
            } else {
                Ok(Step::Busy)
            };
        }
        if self.strip.is_none() {
            if self.strips_seen == self.strips_expected {
                return Ok(Step::Done);
            }
            match cx.try_recv(self.input) {
                Some(Packet::Strip(s)) => {
                    self.strip = Some(s);
                    self.strips_seen += 1;
                    self.cursor = 0;
                }
                Some(other) => {
                    return Err(SimError::Fault {
                        process: self.name.clone(),
                        message: format!("unexpected message {other:?}"),
                    })
                }
                None => return Ok(Step::Blocked(self.input)),
            }
        }
        let groups = self.depth.div_ceil(self.macs_per_output) as u64;
        let macs = (TILE * TILE * self.depth) as u64;
        let counters = cx.counters();
        counters.mac_ops_issued += macs;
        counters.pe_active_cycles += macs;
        // one 4-byte word per input row and per weight row of each MAC group
        counters.local_buffer_reads += groups * TILE as u64 + self.depth as u64;
        self.started = cx.cycle();
        self.remaining = groups + self.tree_latency - 1;
        if self.remaining == 0 {
            self.finish_tile(cx)
        } else {
            Ok(Step::Busy)
        }
    }
}

struct Ppu {
    name: String,
    input: ChannelId,
    output: ChannelId,
    expected: usize,
    done: usize,
    current: Option<(OutChunk, u64)>,
    requant: Rc<RequantParams>,
    raw: bool,
    latency: u64,
    depth: usize,
}

impl Process<Packet> for Ppu {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, cx: &mut Ctx<'_, Packet>) -> Result<Step, SimError> {
        if self.current.is_none() {
            if self.done == self.expected {
                return Ok(Step::Done);
            }
            match cx.try_recv(self.input) {
                Some(Packet::Acc(tile)) => {
                    if tile.depth_done < self.depth {
                        cx.counters().partial_sum_bytes_out += 4 * tile.data.len() as u64;
                    }
                    let chunk = OutChunk {
                        tile_row: tile.tile_row,
                        tile_col: tile.tile_col,
                        bytes: encode_tile(&tile, &self.requant, self.raw, false),
                    };
                    self.current = Some((chunk, self.latency));
                }
                Some(other) => {
                    return Err(SimError::Fault {
                        process: self.name.clone(),
                        message: format!("unexpected message {other:?}"),
                    })
                }
                None => return Ok(Step::Blocked(self.input)),
            }
        }
        let (_, left) = self.current.as_mut().expect("tile in flight");
        if *left > 0 {
            *left -= 1;
            if *left > 0 {
                return Ok(Step::Busy);
            }
        }
        let (chunk, _) = self.current.take().expect("tile in flight");
        match cx.try_send(self.output, Packet::Out(chunk)) {
            Ok(()) => {
                self.done += 1;
                Ok(Step::Busy)
            }
            Err(Packet::Out(chunk)) => {
                self.current = Some((chunk, 0));
                Ok(Step::Blocked(self.output))
            }
            Err(_) => unreachable!("sent an output chunk"),
        }
    }
}

struct CrossbarProc {
    inputs: Vec<ChannelId>,
    output: ChannelId,
    xbar: Crossbar<OutChunk>,
    rr: usize,
    ready: Option<OutChunk>,
}

impl Process<Packet> for CrossbarProc {
    fn name(&self) -> &str {
        "crossbar"
    }

    fn step(&mut self, cx: &mut Ctx<'_, Packet>) -> Result<Step, SimError> {
        let n = self.inputs.len();
        let mut worked = false;
        for i in 0..n {
            let u = (self.rr + i) % n;
            if cx.is_empty(self.inputs[u]) {
                continue;
            }
            if let Some(Packet::Out(chunk)) = cx.try_recv(self.inputs[u]) {
                self.xbar
                    .accept(chunk.tile_row, chunk.tile_col, chunk.clone())
                    .map_err(|e| SimError::Fault {
                        process: "crossbar".into(),
                        message: e.to_string(),
                    })?;
            }
            self.rr = u + 1;
            worked = true;
            break;
        }
        if self.ready.is_none() {
            self.ready = self.xbar.pop_ready();
        }
        if let Some(chunk) = self.ready.take() {
            match cx.try_send(self.output, Packet::Out(chunk)) {
                Ok(()) => worked = true,
                Err(Packet::Out(chunk)) => {
                    self.ready = Some(chunk);
                    return Ok(if worked { Step::Busy } else { Step::Blocked(self.output) });
                }
                Err(_) => unreachable!("sent an output chunk"),
            }
        }
        if self.xbar.is_complete() && self.ready.is_none() {
            return Ok(Step::Done);
        }
        Ok(if worked { Step::Busy } else { Step::Blocked(self.inputs[self.rr % n]) })
    }
}

/// Simulate one invocation on the Vector-MAC design.
pub fn run(buffers: &[PackedBuffer], config: &AccelConfig) -> Result<AccelRun> {
    let work = Workload::decode(buffers, config)?;
    check_capacities(&work, buffers, config)?;
    let vm = &config.vm;
    let (m, n, depth) = (work.setup.m, work.setup.n, work.depth);
    let raw = work.setup.raw_output || !vm.ppu_enabled;
    let units = vm.num_gemm_units;
    let row_tiles = m.div_ceil(TILE);
    let col_tiles = n.div_ceil(TILE);
    let strips = adjusted_strips(&work);
    let schedule = schedule_tiles(strips.len(), row_tiles, units);
    let active: Vec<usize> = (0..units).filter(|&u| !schedule[u].is_empty()).collect();

    let mut engine: Engine<Packet> = Engine::new();
    let dma_ch = engine.channel("dma_to_input_handler", config.bus.num_links);
    let routed = engine.channel("routed", buffers.len());
    let free = engine.channel("weight_release", work.weight_tiles.len());
    let unit_w: Vec<_> = active.iter().map(|u| engine.channel(format!("unit{u}_weights"), 1)).collect();
    let to_ppu: Vec<_> = active.iter().map(|u| engine.channel(format!("unit{u}_to_ppu"), 2)).collect();
    let to_xbar: Vec<_> = active.iter().map(|u| engine.channel(format!("ppu{u}_to_crossbar"), 2)).collect();
    let out = engine.channel("crossbar_to_dma", 2);

    let transfer_done = Rc::new(Cell::new(0u64));
    for link in 0..config.bus.num_links {
        let jobs = buffers
            .iter()
            .enumerate()
            .filter(|(_, b)| b.link == link)
            .map(|(i, b)| (b.total_bytes() as u64, Packet::Buffer(i)))
            .collect();
        engine.spawn(DmaIn::new(link, &config.bus, dma_ch, jobs).with_probe(transfer_done.clone()));
    }
    engine.spawn(InputHandler::new(buffers, &work, config, dma_ch, routed, free));
    let readers = if vm.broadcast_enabled { 1 } else { units as u64 };
    engine.spawn(Scheduler {
        routed,
        free,
        units: unit_w.clone(),
        tile_bytes: work.weight_tiles.iter().map(|w| w.payload_bytes).collect(),
        rank_of_buffer: work.weight_tiles.iter().enumerate().map(|(r, w)| (w.buffer, r)).collect(),
        config_buffer: work.config_buffer,
        input_buffer: work.input_buffer,
        have_config: false,
        have_input: false,
        tile_routed: vec![false; work.weight_tiles.len()],
        next: 0,
        reading: None,
        delivering: false,
        delivered: vec![false; active.len()],
        read_words: depth as u64,
        read_cycles: (depth.div_ceil(vm.num_banks) as u64) * readers,
        readers,
        strips,
    });
    let window = Rc::new(RefCell::new(Window::default()));
    let strips_total = col_tiles;
    for (i, &u) in active.iter().enumerate() {
        let blocks = (u..row_tiles).step_by(units).map(|b| (b, adjusted_block(&work, b))).collect();
        engine.spawn(GemmUnit {
            name: format!("gemm_unit{u}"),
            input: unit_w[i],
            output: to_ppu[i],
            blocks,
            strips_expected: strips_total,
            strips_seen: 0,
            strip: None,
            cursor: 0,
            remaining: 0,
            started: 0,
            pending: None,
            m,
            depth,
            macs_per_output: vm.macs_per_output,
            tree_latency: vm.adder_tree_latency_cycles,
            window: window.clone(),
        });
    }
    let requant = Rc::new(work.setup.requant.clone());
    for (i, &u) in active.iter().enumerate() {
        engine.spawn(Ppu {
            name: format!("ppu{u}"),
            input: to_ppu[i],
            output: to_xbar[i],
            expected: schedule[u].len(),
            done: 0,
            current: None,
            requant: requant.clone(),
            raw,
            latency: if raw { 1 } else { vm.ppu_latency_cycles.max(1) },
            depth,
        });
    }
    engine.spawn(CrossbarProc {
        inputs: to_xbar,
        output: out,
        xbar: Crossbar::new(row_tiles, col_tiles),
        rr: 0,
        ready: None,
    });
    let sink = Rc::new(RefCell::new(Vec::new()));
    engine.spawn(DmaOut::new(&config.bus, out, row_tiles * col_tiles, sink.clone()));

    let cycles = engine.run_until_idle()?;
    let stream = sink
        .borrow()
        .iter()
        .flat_map(|p| match p {
            Packet::Out(c) => c.bytes.clone(),
            _ => Vec::new(),
        })
        .collect();
    let compute_window = window.borrow().span();
    Ok(AccelRun {
        stream,
        layout: output_layout(config),
        m,
        n,
        raw_output: raw,
        cycles,
        transfer_cycles: transfer_done.get(),
        compute_window,
        counters: engine.snapshot_counters(),
        channels: engine.all_channel_stats(),
        tiles: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{requantize_matrix, AccMatrix};

    fn oracle_tile(strip: &[i32], block: &[i32], depth: usize) -> [i32; 16] {
        let mut out = [0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = (0..depth).map(|k| block[r * depth + k] * strip[k * 4 + c]).sum();
            }
        }
        out
    }

    #[test]
    fn k4_takes_one_group_plus_tree() {
        let strip = vec![1; 16];
        let block = vec![2; 16];
        let (tile, cycles) = gemm_unit_compute(&strip, &block, 4, 4, 2).unwrap();
        assert_eq!(cycles, 3);
        assert_eq!(tile, [8; 16]);
    }

    #[test]
    fn zero_weights_zero_tile() {
        let (tile, _) = gemm_unit_compute(&[0; 4], &[7; 4], 1, 4, 2).unwrap();
        assert_eq!(tile, [0; 16]);
        assert!(gemm_unit_compute(&[], &[], 0, 4, 2).is_err());
    }

    #[test]
    fn random_k12_matches_dot_products() {
        let strip: Vec<i32> = (0..48).map(|i| (i * 37 % 255) - 128).collect();
        let block: Vec<i32> = (0..48).map(|i| (i * 91 % 255) - 100).collect();
        for macs in [1, 3, 4, 5] {
            let (tile, cycles) = gemm_unit_compute(&strip, &block, 12, macs, 2).unwrap();
            assert_eq!(tile, oracle_tile(&strip, &block, 12));
            assert_eq!(cycles, 12usize.div_ceil(macs) as u64 + 2);
        }
    }

    #[test]
    fn adder_tree_sums_odd_lengths() {
        for len in 1..9 {
            let mut v: Vec<i32> = (1..=len).collect();
            assert_eq!(adder_tree(&mut v), len * (len + 1) / 2);
        }
    }

    #[test]
    fn ppu_matches_requantize_matrix() {
        let data: Vec<i32> = (0..16).map(|i| i * 1000 - 7000).collect();
        let p = RequantParams::from_scale(0.003, 4, 10).unwrap();
        let tile = AccTile {
            tile_row: 0,
            tile_col: 0,
            row0: 0,
            col0: 0,
            rows: 4,
            cols: 4,
            depth_done: 1,
            data: data.clone(),
        };
        let expected = requantize_matrix(&AccMatrix::from_vec(4, 4, data).unwrap(), &p, 1.0).unwrap();
        assert_eq!(ppu_process(&tile, &p), expected.data());
        let zero = AccTile { data: vec![0; 16], ..tile };
        let p0 = RequantParams::from_scale(0.003, 4, 0).unwrap();
        assert_eq!(ppu_process(&zero, &p0), vec![0; 16]);
    }

    #[test]
    fn schedule_covers_every_pair_once() {
        let sched = schedule_tiles(8, 4, 4);
        let mut pairs: Vec<_> = sched.iter().flatten().copied().collect();
        pairs.sort();
        let expected: Vec<_> = (0..8).flat_map(|s| (0..4).map(move |b| (s, b))).collect();
        assert_eq!(pairs, expected);
        for (u, list) in sched.iter().enumerate() {
            assert!(list.iter().all(|&(_, b)| b % 4 == u));
        }
    }
}
