use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use super::{AccelConfig, DesignKind, Packet, Workload};
use crate::driver::pack::{BufferKind, PackedBuffer};
use crate::error::{Error, Result};
use crate::sim::{ChannelId, Ctx, Process, SimError, Step};

/// Where each inbound buffer lands and what routing it costs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RouteReport {
    /// Bytes each weight tile occupies in the global weight buffer, in tile order.
    pub global_weight_bytes: Vec<usize>,
    /// Bytes in the global input buffer (systolic array only).
    pub global_input_bytes: usize,
    /// Bytes held by each GEMM unit's local input buffer (Vector-MAC only).
    pub unit_input_bytes: Vec<usize>,
    /// Bus words written to each bank.
    pub bank_words: Vec<u64>,
    /// Routing cycles per buffer, in buffer order.
    pub route_cycles: Vec<u64>,
}

/// Bank receiving bus word `word` under round-robin striping.
pub fn bank_of(word: usize, num_banks: usize) -> usize {
    word % num_banks
}

pub(crate) fn num_banks(config: &AccelConfig) -> usize {
    match config.kind {
        DesignKind::Vm => config.vm.num_banks,
        DesignKind::Sa => config.sa.num_banks,
    }
}

/// Routing cost of one buffer: one cycle per bus word per bank write port.
pub(crate) fn route_cost(payload_bytes: usize, config: &AccelConfig) -> u64 {
    let words = payload_bytes.div_ceil(config.bus.width_bytes as usize);
    (words.div_ceil(num_banks(config)) as u64).max(1)
}

fn capacity_check(buffer: String, needed: usize, capacity: usize) -> Result<()> {
    if needed > capacity {
        return Err(Error::Capacity { buffer, needed, capacity });
    }
    Ok(())
}

/// Validate headers and capacities and compute the on-chip placement of one
/// invocation's buffers.
pub fn input_handler_route(buffers: &[PackedBuffer], config: &AccelConfig) -> Result<RouteReport> {
    let work = Workload::decode(buffers, config)?;
    check_capacities(&work, buffers, config)
}

pub(crate) fn check_capacities(work: &Workload, buffers: &[PackedBuffer], config: &AccelConfig) -> Result<RouteReport> {
    let global = config.global_weight_buffer_bytes();
    for w in &work.weight_tiles {
        capacity_check("global weight buffer".into(), w.payload_bytes, global)?;
    }
    let m = work.setup.m;
    let input_payload = buffers[work.input_buffer].payload.len();
    let mut unit_input_bytes = Vec::new();
    let mut global_input_bytes = 0;
    match config.kind {
        DesignKind::Vm => {
            let vm = &config.vm;
            capacity_check(
                "local weight tile buffer".into(),
                vm.tile_cols * work.depth,
                vm.local_weight_tile_bytes,
            )?;
            unit_input_bytes = vec![0; vm.num_gemm_units];
            for b in 0..m.div_ceil(vm.tile_rows) {
                unit_input_bytes[b % vm.num_gemm_units] += vm.tile_rows * work.depth;
            }
            for (u, &bytes) in unit_input_bytes.iter().enumerate() {
                capacity_check(format!("unit {u} local input buffer"), bytes, vm.local_input_buffer_bytes)?;
            }
        }
        DesignKind::Sa => {
            global_input_bytes = input_payload;
            capacity_check(
                "global input buffer".into(),
                input_payload,
                config.sa.global_input_buffer_bytes,
            )?;
        }
    }
    let banks = num_banks(config);
    let bus = config.bus.width_bytes as usize;
    let mut bank_words = vec![0u64; banks];
    for b in buffers.iter().filter(|b| b.header.kind != BufferKind::Config) {
        for word in 0..b.payload.len().div_ceil(bus) {
            bank_words[bank_of(word, banks)] += 1;
        }
    }
    Ok(RouteReport {
        global_weight_bytes: work.weight_tiles.iter().map(|w| w.payload_bytes).collect(),
        global_input_bytes,
        unit_input_bytes,
        bank_words,
        route_cycles: buffers.iter().map(|b| route_cost(b.payload.len(), config)).collect(),
    })
}

/// Writes arriving buffers into on-chip memory. Config and input buffers are
/// routed as soon as they arrive; weight tiles are routed in tile order once
/// the global weight buffer has room for them.
pub(crate) struct InputHandler {
    input: ChannelId,
    notify: ChannelId,
    free: ChannelId,
    kinds: Vec<BufferKind>,
    payload: Vec<usize>,
    cost: Vec<u64>,
    /// Buffer index → position in tile order (weights only).
    weight_rank: BTreeMap<usize, usize>,
    next_rank: usize,
    waiting_weights: BTreeMap<usize, usize>,
    waiting_other: VecDeque<usize>,
    capacity: usize,
    resident: usize,
    num_banks: usize,
    bus_width: usize,
    current: Option<(usize, u64)>,
    unsent: Option<usize>,
    routed: usize,
}

impl InputHandler {
    pub fn new(
        buffers: &[PackedBuffer],
        work: &Workload,
        config: &AccelConfig,
        input: ChannelId,
        notify: ChannelId,
        free: ChannelId,
    ) -> Self {
        Self {
            input,
            notify,
            free,
            kinds: buffers.iter().map(|b| b.header.kind).collect(),
            payload: buffers.iter().map(|b| b.payload.len()).collect(),
            cost: buffers.iter().map(|b| route_cost(b.payload.len(), config)).collect(),
            weight_rank: work.weight_tiles.iter().enumerate().map(|(r, w)| (w.buffer, r)).collect(),
            next_rank: 0,
            waiting_weights: BTreeMap::new(),
            waiting_other: VecDeque::new(),
            capacity: config.global_weight_buffer_bytes(),
            resident: 0,
            num_banks: num_banks(config),
            bus_width: config.bus.width_bytes as usize,
            current: None,
            unsent: None,
            routed: 0,
        }
    }

    fn next_to_route(&mut self) -> Option<usize> {
        if let Some(b) = self.waiting_other.pop_front() {
            return Some(b);
        }
        let (&rank, &buf) = self.waiting_weights.first_key_value()?;
        if rank != self.next_rank || self.resident + self.payload[buf] > self.capacity {
            return None;
        }
        self.waiting_weights.remove(&rank);
        self.next_rank += 1;
        self.resident += self.payload[buf];
        Some(buf)
    }
}

impl Process<Packet> for InputHandler {
    fn name(&self) -> &str {
        "input_handler"
    }

    fn step(&mut self, cx: &mut Ctx<'_, Packet>) -> Result<Step, SimError> {
        while !cx.is_empty(self.free) {
            if let Some(Packet::Free(bytes)) = cx.try_recv(self.free) {
                self.resident -= bytes.min(self.resident);
            }
        }
        if !cx.is_empty(self.input) {
            match cx.try_recv(self.input) {
                Some(Packet::Buffer(b)) => match self.kinds[b] {
                    BufferKind::Weights => {
                        self.waiting_weights.insert(self.weight_rank[&b], b);
                    }
                    _ => self.waiting_other.push_back(b),
                },
                other => {
                    return Err(SimError::Fault {
                        process: "input_handler".into(),
                        message: format!("unexpected message {other:?}"),
                    })
                }
            }
        }
        if let Some(b) = self.unsent {
            if cx.try_send(self.notify, Packet::Routed(b)).is_err() {
                return Ok(Step::Blocked(self.notify));
            }
            self.unsent = None;
            self.routed += 1;
        }
        if self.current.is_none() {
            if let Some(b) = self.next_to_route() {
                if self.kinds[b] != BufferKind::Config {
                    for word in 0..self.payload[b].div_ceil(self.bus_width) {
                        cx.counters().record_bank_write(bank_of(word, self.num_banks), 1);
                    }
                }
                self.current = Some((b, self.cost[b]));
            }
        }
        if let Some((b, remaining)) = self.current.as_mut() {
            *remaining -= 1;
            if *remaining == 0 {
                let b = *b;
                self.current = None;
                match cx.try_send(self.notify, Packet::Routed(b)) {
                    Ok(()) => self.routed += 1,
                    Err(_) => self.unsent = Some(b),
                }
            }
            return Ok(Step::Busy);
        }
        if self.routed == self.kinds.len() {
            return Ok(Step::Done);
        }
        if self.waiting_weights.is_empty() {
            Ok(Step::Blocked(self.input))
        } else {
            Ok(Step::Blocked(self.free))
        }
    }
}
