use std::ops::AddAssign;

use serde::Serialize;

use super::pack::pack_invocations;
use super::plan::{plan_weight_tiles, TilePlan};
use super::task::GemmTask;
use super::unpack::{unpack_outputs, Unpacked};
use crate::accel::{run_accelerator, AccelConfig, DesignKind, TileRecord};
use crate::error::{Error, Result};
use crate::par::{try_par_map, Execution};
use crate::quant::{requantize, AccMatrix, QuantTensor, MAX_EXACT_DEPTH};
use crate::sim::{ChannelId, Ctx, CycleCounters, Engine, Process, SimError, Step};

/// Modeled cycles of the four pipeline stages for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StageCycles {
    pub pack: u64,
    pub transfer: u64,
    pub compute: u64,
    pub unpack: u64,
}

impl StageCycles {
    pub fn as_array(&self) -> [u64; 4] {
        [self.pack, self.transfer, self.compute, self.unpack]
    }

    pub fn total(&self) -> u64 {
        self.as_array().iter().sum()
    }
}

impl AddAssign<&StageCycles> for StageCycles {
    fn add_assign(&mut self, rhs: &StageCycles) {
        self.pack += rhs.pack;
        self.transfer += rhs.transfer;
        self.compute += rhs.compute;
        self.unpack += rhs.unpack;
    }
}

/// Everything observed while executing one task on the accelerator.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub output: QuantTensor,
    pub plan: TilePlan,
    /// Stage cycles of each row batch, in dispatch order.
    pub batches: Vec<StageCycles>,
    pub counters: CycleCounters,
    pub tiles: Vec<TileRecord>,
    /// Accelerator invocations (one per batch and K-range).
    pub invocations: usize,
    pub accel_cycles: u64,
    /// Sum over invocations of first-MAC-to-last-tile cycles.
    pub compute_window: u64,
    pub output_stream_bytes: u64,
}

impl TaskRun {
    pub fn stage_totals(&self) -> StageCycles {
        let mut total = StageCycles::default();
        for b in &self.batches {
            total += b;
        }
        total
    }
}

/// Rows per dispatched batch: bounded by `max_batch_rows` and by the input
/// buffer capacity at the plan's deepest K-range.
pub fn batch_rows(m: usize, plan: &TilePlan, config: &AccelConfig) -> Result<usize> {
    let native = config.native_rows();
    let depth = plan.max_k_range();
    let (cap_rows, buffer, capacity) = match config.kind {
        DesignKind::Vm => {
            let vm = &config.vm;
            let blocks = vm.local_input_buffer_bytes / (vm.tile_rows * depth);
            (blocks * vm.num_gemm_units * vm.tile_rows, "local input buffer", vm.local_input_buffer_bytes)
        }
        DesignKind::Sa => {
            let sa = &config.sa;
            ((sa.global_input_buffer_bytes / depth) / sa.rows * sa.rows, "global input buffer", sa.global_input_buffer_bytes)
        }
    };
    if cap_rows == 0 {
        return Err(Error::Capacity {
            buffer: buffer.into(),
            needed: native * depth,
            capacity,
        });
    }
    let mut rows = config.driver.max_batch_rows.min(cap_rows);
    if rows >= native {
        rows -= rows % native;
    }
    Ok(rows.min(m))
}

/// Pack, run and unpack one task, batching rows and summing K-ranges on the
/// host when the plan splits K.
pub fn execute_task(task: &GemmTask, config: &AccelConfig) -> Result<TaskRun> {
    config.validate()?;
    let (m, n, k) = (task.m(), task.n(), task.k());
    if k > MAX_EXACT_DEPTH {
        return Err(Error::dims(format!(
            "K={k} exceeds the exact accumulation depth {MAX_EXACT_DEPTH}"
        )));
    }
    let plan = plan_weight_tiles(m, n, k, config)?;
    plan.validate(config.global_weight_buffer_bytes())?;
    let rows = batch_rows(m, &plan, config)?;
    let drv = &config.driver;

    let mut out = vec![0u8; m * n];
    let mut run = TaskRun {
        output: QuantTensor::filled(vec![1], 0, 1.0, 0)?,
        plan: plan.clone(),
        batches: Vec::new(),
        counters: CycleCounters::default(),
        tiles: Vec::new(),
        invocations: 0,
        accel_cycles: 0,
        compute_window: 0,
        output_stream_bytes: 0,
    };
    for start in (0..m).step_by(rows) {
        let end = (start + rows).min(m);
        let bm = end - start;
        let sub = task.row_slice(start, end)?;
        let sub_plan = plan_weight_tiles(bm, n, k, config)?;
        let invocations = pack_invocations(&sub, &sub_plan, config)?;
        let pack_bytes: usize = invocations.iter().flatten().map(|b| b.total_bytes()).sum();
        let split = invocations.len() > 1;
        let mut stages = StageCycles {
            pack: drv.cpu_cycles_for_bytes(pack_bytes as u64),
            ..StageCycles::default()
        };
        let mut acc: Option<AccMatrix> = None;
        let mut stream_bytes = 0u64;
        for inv in &invocations {
            let r = run_accelerator(inv, config)?;
            stages.transfer += r.transfer_cycles;
            stages.compute += r.cycles - r.transfer_cycles;
            stream_bytes += r.stream.len() as u64;
            run.counters += &r.counters;
            run.tiles.extend_from_slice(&r.tiles);
            run.invocations += 1;
            run.accel_cycles += r.cycles;
            run.compute_window += r.compute_window;
            match unpack_outputs(&r.stream, bm, n, r.layout)? {
                Unpacked::Quantized(q) if !split => out[start * n..end * n].copy_from_slice(&q),
                Unpacked::Quantized(_) => {
                    return Err(Error::Stream("K-split invocation returned requantized output".into()))
                }
                Unpacked::Raw(a) => match acc.as_mut() {
                    None => acc = Some(a),
                    Some(total) => {
                        for (t, v) in total.data.iter_mut().zip(&a.data) {
                            *t += v;
                        }
                    }
                },
            }
        }
        if let Some(total) = acc {
            for (i, &v) in total.data.iter().enumerate() {
                out[start * n + i] = requantize(v, i % n, &task.requant);
            }
        }
        stages.unpack = drv.cpu_cycles_for_bytes(stream_bytes);
        run.output_stream_bytes += stream_bytes;
        run.batches.push(stages);
    }
    run.output = QuantTensor::new(out, vec![m, n], task.output_scale, task.requant.output_zero_point)?;
    Ok(run)
}

/// Execute a single task (alias of [`execute_task`]).
pub fn run_gemm(task: &GemmTask, config: &AccelConfig) -> Result<TaskRun> {
    execute_task(task, config)
}

/// Timing summary of a dispatch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CycleReport {
    /// Makespan in the configured mode.
    pub elapsed_cycles: u64,
    pub pipelined_cycles: u64,
    pub serial_cycles: u64,
    pub pipelined: bool,
    pub batches: usize,
    pub stage_totals: StageCycles,
    pub counters: CycleCounters,
}

/// Makespan when every batch runs all four stages before the next starts.
pub fn serial_makespan(batches: &[StageCycles]) -> u64 {
    batches.iter().map(StageCycles::total).sum()
}

#[derive(Debug, Clone, Copy)]
struct Token {
    batch: usize,
    ready: u64,
}

struct Source {
    out: ChannelId,
    next: usize,
    total: usize,
}

impl Process<Token> for Source {
    fn name(&self) -> &str {
        "host_queue"
    }

    fn step(&mut self, cx: &mut Ctx<'_, Token>) -> Result<Step, SimError> {
        while self.next < self.total {
            if cx.try_send(self.out, Token { batch: self.next, ready: 0 }).is_err() {
                return Ok(Step::Blocked(self.out));
            }
            self.next += 1;
        }
        Ok(Step::Done)
    }
}

struct Stage {
    name: &'static str,
    input: ChannelId,
    output: ChannelId,
    durations: Vec<u64>,
    current: Option<(usize, u64)>,
    done: usize,
}

impl Process<Token> for Stage {
    fn name(&self) -> &str {
        self.name
    }

    fn step(&mut self, cx: &mut Ctx<'_, Token>) -> Result<Step, SimError> {
        let now = cx.cycle();
        loop {
            if let Some((batch, finish)) = self.current {
                // the result is handed over in the stage's last busy cycle
                if now + 1 < finish {
                    return Ok(Step::Busy);
                }
                if cx.try_send(self.output, Token { batch, ready: finish.max(now) }).is_err() {
                    return Ok(Step::Blocked(self.output));
                }
                self.current = None;
                self.done += 1;
                if self.done == self.durations.len() {
                    return Ok(Step::Done);
                }
                if finish > now {
                    return Ok(Step::Busy);
                }
                continue;
            }
            if self.done == self.durations.len() {
                return Ok(Step::Done);
            }
            match cx.peek(self.input).copied() {
                Some(tok) if tok.ready <= now => {
                    cx.try_recv(self.input);
                    self.current = Some((tok.batch, now + self.durations[tok.batch]));
                }
                Some(_) => return Ok(Step::Busy),
                None => {
                    cx.can_recv(self.input);
                    return Ok(Step::Blocked(self.input));
                }
            }
        }
    }
}

/// Makespan of a four-stage flow shop (pack, transfer, compute, unpack) whose
/// stages are separated by `buffers`-deep queues, simulated on the engine.
pub fn pipeline_makespan(batches: &[StageCycles], buffers: usize) -> Result<u64> {
    if batches.is_empty() {
        return Ok(0);
    }
    if buffers == 0 {
        return Err(Error::Config("pipeline needs at least one buffer set".into()));
    }
    const NAMES: [&str; 4] = ["pack", "transfer", "compute", "unpack"];
    let mut engine: Engine<Token> = Engine::new();
    let mut chans = vec![engine.channel("host_to_pack", buffers)];
    for name in &NAMES[..3] {
        chans.push(engine.channel(format!("{name}_out"), buffers));
    }
    chans.push(engine.channel("results", batches.len()));
    engine.spawn(Source {
        out: chans[0],
        next: 0,
        total: batches.len(),
    });
    for (s, name) in NAMES.iter().enumerate() {
        engine.spawn(Stage {
            name,
            input: chans[s],
            output: chans[s + 1],
            durations: batches.iter().map(|b| b.as_array()[s]).collect(),
            current: None,
            done: 0,
        });
    }
    // a reader for the results channel would only drain it; its tokens
    // carry the completion cycles
    struct Sink {
        input: ChannelId,
        expected: usize,
        seen: usize,
        makespan: std::rc::Rc<std::cell::Cell<u64>>,
    }
    impl Process<Token> for Sink {
        fn name(&self) -> &str {
            "results"
        }
        fn step(&mut self, cx: &mut Ctx<'_, Token>) -> Result<Step, SimError> {
            if self.seen == self.expected {
                return Ok(Step::Done);
            }
            while !cx.is_empty(self.input) {
                if let Some(tok) = cx.try_recv(self.input) {
                    self.makespan.set(self.makespan.get().max(tok.ready));
                    self.seen += 1;
                }
            }
            Ok(if self.seen == self.expected { Step::Done } else { Step::Blocked(self.input) })
        }
    }
    let makespan = std::rc::Rc::new(std::cell::Cell::new(0));
    engine.spawn(Sink {
        input: chans[4],
        expected: batches.len(),
        seen: 0,
        makespan: makespan.clone(),
    });
    engine.run_until_idle()?;
    Ok(makespan.get())
}

/// Execute tasks (data-parallel across tasks under `exec`) and model their
/// dispatch through the host/accelerator pipeline.
pub fn dispatch_with(tasks: &[GemmTask], config: &AccelConfig, exec: Execution) -> Result<(Vec<TaskRun>, CycleReport)> {
    let runs = try_par_map(tasks, exec, |t| execute_task(t, config))?;
    let batches: Vec<StageCycles> = runs.iter().flat_map(|r| r.batches.iter().copied()).collect();
    let serial = serial_makespan(&batches);
    let pipelined = pipeline_makespan(&batches, config.driver.pipeline_buffers)?;
    let mut report = CycleReport {
        elapsed_cycles: if config.driver.pipelined { pipelined } else { serial },
        pipelined_cycles: pipelined,
        serial_cycles: serial,
        pipelined: config.driver.pipelined,
        batches: batches.len(),
        ..CycleReport::default()
    };
    for b in &batches {
        report.stage_totals += b;
    }
    for r in &runs {
        report.counters += &r.counters;
    }
    Ok((runs, report))
}

/// Dispatch tasks and return their outputs with the cycle report.
pub fn dispatch_pipelined(tasks: &[GemmTask], config: &AccelConfig) -> Result<(Vec<QuantTensor>, CycleReport)> {
    let (runs, report) = dispatch_with(tasks, config, Execution::default())?;
    Ok((runs.into_iter().map(|r| r.output).collect(), report))
}
