//! Systolic array design: a scheduler filling one queue per array row and
//! column, an output-stationary `R × C` MAC array with skewed operand
//! injection, and a single PPU draining tiles column by column.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use super::input::{check_capacities, InputHandler};
use super::{encode_tile, output_layout, AccTile, AccelConfig, AccelRun, OutChunk, Packet, TileRecord, Window, Workload};
use crate::driver::pack::PackedBuffer;
use crate::error::{Error, Result};
use crate::quant::RequantParams;
use crate::sim::{ChannelId, Ctx, DmaIn, DmaOut, Engine, Process, SimError, Step};

/// One array pass: a row block of inputs against a column strip of weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pass {
    rank: usize,
    tile_row: usize,
    tile_col: usize,
    rows: usize,
    cols: usize,
}

/// Unstalled latency of one tile pass, from first injection to last accumulate.
pub fn tile_latency(depth: usize, rows: usize, cols: usize) -> u64 {
    (depth + rows + cols - 1) as u64
}

/// Cycle at which operand `k` of array row (or column) `lane` enters the array,
/// counted from the tile's first injection.
pub fn injection_cycle(k: usize, lane: usize) -> u64 {
    (k + lane) as u64
}

/// Pure model of one output-stationary tile pass over zero-point adjusted
/// operands: `inputs` is `rows × depth` row-major and `weights` `depth × cols`
/// row-major. Steps the same register transfer as the simulated array and
/// returns the accumulators (row-major) and the step count.
pub fn systolic_compute_tile(
    inputs: &[i32],
    weights: &[i32],
    rows: usize,
    cols: usize,
    depth: usize,
) -> Result<(Vec<i32>, u64)> {
    if depth == 0 {
        return Err(Error::dims("systolic tile depth must be positive"));
    }
    if inputs.len() != rows * depth || weights.len() != depth * cols {
        return Err(Error::dims("systolic tile operands do not match the array shape"));
    }
    let mut cells = Cells::new(rows, cols);
    let steps = tile_latency(depth, rows, cols);
    for t in 0..steps as usize {
        cells.mac();
        cells.shift();
        for r in 0..rows {
            cells.a[r * cols] = lane_active(t, r, depth).then(|| inputs[r * depth + t - r]);
        }
        for c in 0..cols {
            cells.w[c] = lane_active(t, c, depth).then(|| weights[(t - c) * cols + c]);
        }
    }
    Ok((cells.acc, steps))
}

fn lane_active(t: usize, lane: usize, depth: usize) -> bool {
    t >= lane && t - lane < depth
}

/// Register state of the MAC grid.
struct Cells {
    rows: usize,
    cols: usize,
    a: Vec<Option<i32>>,
    w: Vec<Option<i32>>,
    acc: Vec<i32>,
}

impl Cells {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            a: vec![None; rows * cols],
            w: vec![None; rows * cols],
            acc: vec![0; rows * cols],
        }
    }

    fn reset(&mut self) {
        self.a.fill(None);
        self.w.fill(None);
        self.acc.fill(0);
    }

    /// Multiply-accumulate in every cell holding both operands. Returns the
    /// number of MACs performed.
    fn mac(&mut self) -> u64 {
        let mut n = 0;
        for i in 0..self.acc.len() {
            if let (Some(x), Some(y)) = (self.a[i], self.w[i]) {
                self.acc[i] += x * y;
                n += 1;
            }
        }
        n
    }

    /// Pass inputs one cell right and weights one cell down.
    fn shift(&mut self) {
        let (rows, cols) = (self.rows, self.cols);
        for r in 0..rows {
            for c in (1..cols).rev() {
                self.a[r * cols + c] = self.a[r * cols + c - 1];
            }
        }
        for r in (1..rows).rev() {
            for c in 0..cols {
                self.w[r * cols + c] = self.w[(r - 1) * cols + c];
            }
        }
    }
}

/// Single-PPU post-processing of a tile, drained column by column.
pub fn sa_ppu_process(tile: &AccTile, p: &RequantParams) -> Vec<u8> {
    encode_tile(tile, p, false, true)
}

struct Scheduler {
    routed: ChannelId,
    free: ChannelId,
    queues: Vec<ChannelId>,
    passes: Rc<Vec<Pass>>,
    work: Rc<Workload>,
    rows: usize,
    cols: usize,
    /// `(pass, k)` position of each queue's stream.
    cursors: Vec<(usize, usize)>,
    rank_of_buffer: BTreeMap<usize, usize>,
    have_config: bool,
    have_input: bool,
    tile_routed: Vec<bool>,
    last_pass: Vec<usize>,
    freed: Vec<bool>,
}

impl Scheduler {
    fn operand(&self, queue: usize, pass: &Pass, k: usize) -> u8 {
        let w = &self.work;
        let depth = w.depth;
        if queue < self.rows {
            let row = pass.tile_row * self.rows + queue;
            if row < w.setup.m {
                w.inputs[row * depth + k]
            } else {
                w.setup.lhs_zero_point
            }
        } else {
            let tile = &w.weight_tiles[pass.rank];
            let local = pass.tile_col * self.cols + (queue - self.rows) - tile.n_offset;
            if local < tile.width {
                tile.data[k * tile.width + local]
            } else {
                w.setup.rhs_zero_point
            }
        }
    }
}

impl Process<Packet> for Scheduler {
    fn name(&self) -> &str {
        "scheduler"
    }

    fn step(&mut self, cx: &mut Ctx<'_, Packet>) -> Result<Step, SimError> {
        while !cx.is_empty(self.routed) {
            if let Some(Packet::Routed(b)) = cx.try_recv(self.routed) {
                if b == self.work.config_buffer {
                    self.have_config = true;
                } else if b == self.work.input_buffer {
                    self.have_input = true;
                } else if let Some(&rank) = self.rank_of_buffer.get(&b) {
                    self.tile_routed[rank] = true;
                }
            }
        }
        if !(self.have_config && self.have_input) {
            return Ok(Step::Blocked(self.routed));
        }
        let depth = self.work.depth;
        let total = self.passes.len();
        let mut pushed = false;
        let mut full = None;
        for q in 0..self.queues.len() {
            let (p, k) = self.cursors[q];
            if p == total {
                continue;
            }
            let pass = self.passes[p];
            if !self.tile_routed[pass.rank] {
                continue;
            }
            if !cx.can_send(self.queues[q]) {
                full.get_or_insert(self.queues[q]);
                continue;
            }
            let value = self.operand(q, &pass, k);
            if cx.try_send(self.queues[q], Packet::Operand(value)).is_err() {
                unreachable!("queue had room");
            }
            pushed = true;
            if k == 0 && q == 0 {
                cx.counters().global_input_buffer_reads += (self.rows * depth).div_ceil(4) as u64;
            }
            if k == 0 && q == self.rows {
                cx.counters().global_weight_buffer_reads += (self.cols * depth).div_ceil(4) as u64;
            }
            self.cursors[q] = if k + 1 == depth { (p + 1, 0) } else { (p, k + 1) };
        }
        let slowest = self.cursors.iter().map(|&(p, _)| p).min().unwrap_or(total);
        for rank in 0..self.freed.len() {
            if !self.freed[rank] && self.last_pass[rank] < slowest {
                self.freed[rank] = true;
                let bytes = self.work.weight_tiles[rank].payload_bytes;
                if cx.try_send(self.free, Packet::Free(bytes)).is_err() {
                    return Err(SimError::Fault {
                        process: "scheduler".into(),
                        message: "weight release channel full".into(),
                    });
                }
            }
        }
        if slowest == total {
            return Ok(Step::Done);
        }
        if pushed {
            Ok(Step::Busy)
        } else {
            Ok(Step::Blocked(full.unwrap_or(self.routed)))
        }
    }
}

struct Array {
    row_queues: Vec<ChannelId>,
    col_queues: Vec<ChannelId>,
    output: ChannelId,
    passes: Rc<Vec<Pass>>,
    cells: Cells,
    depth: usize,
    lhs_zp: i32,
    rhs_zp: i32,
    pass: usize,
    t: usize,
    start: u64,
    stalled: bool,
    pending: Option<AccTile>,
    log: Rc<RefCell<Vec<TileRecord>>>,
    window: Rc<RefCell<Window>>,
}

impl Array {
    fn pop(cx: &mut Ctx<'_, Packet>, ch: ChannelId) -> Result<i32, SimError> {
        match cx.try_recv(ch) {
            Some(Packet::Operand(v)) => Ok(i32::from(v)),
            other => Err(SimError::Fault {
                process: "systolic_array".into(),
                message: format!("expected an operand, got {other:?}"),
            }),
        }
    }

    fn send(&mut self, cx: &mut Ctx<'_, Packet>, tile: AccTile) -> Step {
        match cx.try_send(self.output, Packet::Acc(tile)) {
            Ok(()) => {
                self.pass += 1;
                self.t = 0;
                self.stalled = false;
                Step::Busy
            }
            Err(Packet::Acc(tile)) => {
                self.pending = Some(tile);
                Step::Blocked(self.output)
            }
            Err(_) => unreachable!("sent an accumulator tile"),
        }
    }
}

impl Process<Packet> for Array {
    fn name(&self) -> &str {
        "systolic_array"
    }

    fn step(&mut self, cx: &mut Ctx<'_, Packet>) -> Result<Step, SimError> {
        if let Some(tile) = self.pending.take() {
            return Ok(self.send(cx, tile));
        }
        if self.pass == self.passes.len() {
            return Ok(Step::Done);
        }
        let (rows, cols, depth, t) = (self.cells.rows, self.cells.cols, self.depth, self.t);
        for (lane, &ch) in self.row_queues.iter().enumerate().chain(self.col_queues.iter().enumerate()) {
            if lane_active(t, lane, depth) && !cx.can_recv(ch) {
                if t > 0 {
                    self.stalled = true;
                }
                return Ok(Step::Blocked(ch));
            }
        }
        if t == 0 {
            self.start = cx.cycle();
            self.cells.reset();
        }
        let macs = self.cells.mac();
        let counters = cx.counters();
        counters.mac_ops_issued += macs;
        counters.pe_active_cycles += macs;
        self.cells.shift();
        for r in 0..rows {
            self.cells.a[r * cols] = if lane_active(t, r, depth) {
                Some(Self::pop(cx, self.row_queues[r])? - self.lhs_zp)
            } else {
                None
            };
        }
        for c in 0..cols {
            self.cells.w[c] = if lane_active(t, c, depth) {
                Some(Self::pop(cx, self.col_queues[c])? - self.rhs_zp)
            } else {
                None
            };
        }
        self.t += 1;
        if self.t as u64 != tile_latency(depth, rows, cols) {
            return Ok(Step::Busy);
        }
        let pass = self.passes[self.pass];
        let end = cx.cycle();
        self.log.borrow_mut().push(TileRecord {
            tile_row: pass.tile_row,
            tile_col: pass.tile_col,
            depth,
            start_cycle: self.start,
            end_cycle: end,
            stalled: self.stalled,
        });
        self.window.borrow_mut().touch(self.start, end);
        let mut data = Vec::with_capacity(pass.rows * pass.cols);
        for r in 0..pass.rows {
            data.extend_from_slice(&self.cells.acc[r * cols..r * cols + pass.cols]);
        }
        let tile = AccTile {
            tile_row: pass.tile_row,
            tile_col: pass.tile_col,
            row0: pass.tile_row * rows,
            col0: pass.tile_col * cols,
            rows: pass.rows,
            cols: pass.cols,
            depth_done: depth,
            data,
        };
        Ok(self.send(cx, tile))
    }
}

struct Ppu {
    input: ChannelId,
    output: ChannelId,
    expected: usize,
    done: usize,
    drain_cycles: u64,
    current: Option<(OutChunk, u64)>,
    requant: RequantParams,
    raw: bool,
    depth: usize,
}

impl Process<Packet> for Ppu {
    fn name(&self) -> &str {
        "ppu"
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
                        bytes: encode_tile(&tile, &self.requant, self.raw, true),
                    };
                    self.current = Some((chunk, self.drain_cycles));
                }
                Some(other) => {
                    return Err(SimError::Fault {
                        process: "ppu".into(),
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

fn plan_passes(work: &Workload, rows: usize, cols: usize) -> Vec<Pass> {
    let m = work.setup.m;
    let mut passes = Vec::new();
    for (rank, tile) in work.weight_tiles.iter().enumerate() {
        let first = tile.n_offset / cols;
        let last = (tile.n_offset + tile.width).div_ceil(cols);
        for tile_col in first..last {
            let pass_cols = cols.min(tile.n_offset + tile.width - tile_col * cols);
            for tile_row in 0..m.div_ceil(rows) {
                passes.push(Pass {
                    rank,
                    tile_row,
                    tile_col,
                    rows: rows.min(m - tile_row * rows),
                    cols: pass_cols,
                });
            }
        }
    }
    passes
}

/// Simulate one invocation on the systolic array design.
pub fn run(buffers: &[PackedBuffer], config: &AccelConfig) -> Result<AccelRun> {
    let work = Rc::new(Workload::decode(buffers, config)?);
    check_capacities(&work, buffers, config)?;
    let sa = &config.sa;
    let (rows, cols) = (sa.rows, sa.cols);
    let (m, n, depth) = (work.setup.m, work.setup.n, work.depth);
    let raw = work.setup.raw_output || !sa.ppu_enabled;
    let passes = Rc::new(plan_passes(&work, rows, cols));
    let tiles = work.weight_tiles.len();
    let mut last_pass = vec![0; tiles];
    for (i, p) in passes.iter().enumerate() {
        last_pass[p.rank] = i;
    }

    let mut engine: Engine<Packet> = Engine::new();
    let dma_ch = engine.channel("dma_to_input_handler", config.bus.num_links);
    let routed = engine.channel("routed", buffers.len());
    let free = engine.channel("weight_release", tiles);
    let row_queues: Vec<_> = (0..rows).map(|r| engine.channel(format!("row_queue{r}"), sa.queue_depth)).collect();
    let col_queues: Vec<_> = (0..cols).map(|c| engine.channel(format!("col_queue{c}"), sa.queue_depth)).collect();
    let to_ppu = engine.channel("array_to_ppu", 1);
    let out = engine.channel("ppu_to_dma", 2);

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
    engine.spawn(Scheduler {
        routed,
        free,
        queues: row_queues.iter().chain(&col_queues).copied().collect(),
        passes: passes.clone(),
        work: work.clone(),
        rows,
        cols,
        cursors: vec![(0, 0); rows + cols],
        rank_of_buffer: work.weight_tiles.iter().enumerate().map(|(r, w)| (w.buffer, r)).collect(),
        have_config: false,
        have_input: false,
        tile_routed: vec![false; tiles],
        last_pass,
        freed: vec![false; tiles],
    });
    let log = Rc::new(RefCell::new(Vec::new()));
    let window = Rc::new(RefCell::new(Window::default()));
    engine.spawn(Array {
        row_queues,
        col_queues,
        output: to_ppu,
        passes: passes.clone(),
        cells: Cells::new(rows, cols),
        depth,
        lhs_zp: i32::from(work.setup.lhs_zero_point),
        rhs_zp: i32::from(work.setup.rhs_zero_point),
        pass: 0,
        t: 0,
        start: 0,
        stalled: false,
        pending: None,
        log: log.clone(),
        window: window.clone(),
    });
    engine.spawn(Ppu {
        input: to_ppu,
        output: out,
        expected: passes.len(),
        done: 0,
        drain_cycles: cols as u64,
        current: None,
        requant: work.setup.requant.clone(),
        raw,
        depth,
    });
    let sink = Rc::new(RefCell::new(Vec::new()));
    engine.spawn(DmaOut::new(&config.bus, out, passes.len(), sink.clone()));

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
    let tiles = log.borrow().clone();
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
        tiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{requantize_matrix, AccMatrix};

    fn oracle(inputs: &[i32], weights: &[i32], rows: usize, cols: usize, depth: usize) -> Vec<i32> {
        let mut out = vec![0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = (0..depth).map(|k| inputs[r * depth + k] * weights[k * cols + c]).sum();
            }
        }
        out
    }

    #[test]
    fn one_cell_k5() {
        let (acc, steps) = systolic_compute_tile(&[1, 2, 3, 4, 5], &[5, 4, 3, 2, 1], 1, 1, 5).unwrap();
        assert_eq!(steps, 6);
        assert_eq!(acc, vec![5 + 8 + 9 + 8 + 5]);
    }

    #[test]
    fn four_by_four_k8_latency() {
        assert_eq!(tile_latency(8, 4, 4), 15);
        let inputs: Vec<i32> = (0..32).map(|i| i - 16).collect();
        let weights: Vec<i32> = (0..32).map(|i| 3 * i - 50).collect();
        let (acc, steps) = systolic_compute_tile(&inputs, &weights, 4, 4, 8).unwrap();
        assert_eq!(steps, 15);
        assert_eq!(acc, oracle(&inputs, &weights, 4, 4, 8));
    }

    #[test]
    fn rectangular_arrays_match_oracle() {
        for (rows, cols, depth) in [(2, 3, 1), (3, 2, 7), (16, 16, 32), (5, 1, 4)] {
            let inputs: Vec<i32> = (0..rows * depth).map(|i| (i as i32 * 29) % 255 - 127).collect();
            let weights: Vec<i32> = (0..depth * cols).map(|i| (i as i32 * 53) % 255 - 128).collect();
            let (acc, _) = systolic_compute_tile(&inputs, &weights, rows, cols, depth).unwrap();
            assert_eq!(acc, oracle(&inputs, &weights, rows, cols, depth));
        }
        assert!(systolic_compute_tile(&[], &[], 2, 2, 0).is_err());
    }

    #[test]
    fn skew_definition() {
        assert_eq!(injection_cycle(0, 0), 0);
        assert_eq!(injection_cycle(3, 2), 5);
        assert!(lane_active(5, 2, 4) && !lane_active(6, 2, 4) && !lane_active(1, 2, 4));
    }

    #[test]
    fn ppu_column_major_matches_requantize_matrix() {
        let data: Vec<i32> = (0..6).map(|i| i * 4000 - 9000).collect();
        let p = RequantParams::from_scale(0.002, 3, 7).unwrap();
        let tile = AccTile {
            tile_row: 0,
            tile_col: 0,
            row0: 0,
            col0: 0,
            rows: 2,
            cols: 3,
            depth_done: 1,
            data: data.clone(),
        };
        let expected = requantize_matrix(&AccMatrix::from_vec(2, 3, data).unwrap(), &p, 1.0).unwrap();
        let e = expected.data();
        assert_eq!(sa_ppu_process(&tile, &p), vec![e[0], e[3], e[1], e[4], e[2], e[5]]);
    }
}
