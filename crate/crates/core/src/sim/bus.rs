use std::cell::{Cell, RefCell};
use std::collections::VecDeque;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{ChannelId, CycleCounters, Ctx, Process, SimError, Step};

/// Host-to-accelerator interconnect: `num_links` independent links, each
/// moving `width_bytes` per cycle after a fixed per-transfer setup latency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusModel {
    pub width_bytes: u64,
    pub num_links: usize,
    pub setup_cycles: u64,
}

impl Default for BusModel {
    fn default() -> Self {
        Self {
            width_bytes: 8,
            num_links: 2,
            setup_cycles: 10,
        }
    }
}

impl BusModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.width_bytes == 0 {
            return Err("bus width_bytes must be >= 1".into());
        }
        if self.num_links == 0 {
            return Err("bus num_links must be >= 1".into());
        }
        Ok(())
    }

    /// Cycles for one transfer of `bytes` on an otherwise idle link.
    pub fn transfer_cycles(&self, bytes: u64) -> u64 {
        self.setup_cycles + bytes.div_ceil(self.width_bytes)
    }

    /// Cycles to stream `bytes` once the transfer is already set up.
    pub fn streaming_cycles(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.width_bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmaDirection {
    HostToDevice,
    DeviceToHost,
}

/// Account a single transfer and return the cycles it occupies its link.
pub fn dma_transfer(
    bytes: u64,
    link: usize,
    bus: &BusModel,
    direction: DmaDirection,
    counters: &mut CycleCounters,
) -> Result<u64, SimError> {
    if link >= bus.num_links {
        return Err(SimError::InvalidLink {
            link,
            num_links: bus.num_links,
        });
    }
    match direction {
        DmaDirection::HostToDevice => counters.dma_bytes_in += bytes,
        DmaDirection::DeviceToHost => counters.dma_bytes_out += bytes,
    }
    Ok(bus.transfer_cycles(bytes))
}

/// Anything carried over a DMA link.
pub trait Payload {
    fn byte_len(&self) -> usize;
}

/// One inbound DMA link. Transfers queued on the same link serialize; each
/// message is delivered to `dest` in the cycle its last beat arrives.
pub struct DmaIn<M> {
    name: String,
    bus: BusModel,
    jobs: VecDeque<(u64, M)>,
    dest: ChannelId,
    current: Option<(u64, u64, M)>,
    finished_at: Option<Rc<Cell<u64>>>,
}

impl<M> DmaIn<M> {
    pub fn new(link: usize, bus: &BusModel, dest: ChannelId, jobs: Vec<(u64, M)>) -> Self {
        Self {
            name: format!("dma_in{link}"),
            bus: bus.clone(),
            jobs: jobs.into(),
            dest,
            current: None,
            finished_at: None,
        }
    }

    /// Record the cycle count at which this link delivered its last message.
    pub fn with_probe(mut self, probe: Rc<Cell<u64>>) -> Self {
        self.finished_at = Some(probe);
        self
    }
}

impl<M> Process<M> for DmaIn<M> {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, cx: &mut Ctx<'_, M>) -> Result<Step, SimError> {
        if self.current.is_none() {
            match self.jobs.pop_front() {
                Some((bytes, msg)) => {
                    let cost = self.bus.transfer_cycles(bytes).max(1);
                    self.current = Some((bytes, cost, msg));
                }
                None => return Ok(Step::Done),
            }
        }
        let (bytes, remaining, _) = self.current.as_mut().expect("job");
        if *remaining > 0 {
            *remaining -= 1;
        }
        if *remaining > 0 {
            return Ok(Step::Busy);
        }
        let bytes = *bytes;
        let (_, _, msg) = self.current.take().expect("job");
        match cx.try_send(self.dest, msg) {
            Ok(()) => {
                cx.counters().dma_bytes_in += bytes;
                if let Some(p) = &self.finished_at {
                    p.set(p.get().max(cx.cycle() + 1));
                }
                if self.jobs.is_empty() {
                    Ok(Step::Done)
                } else {
                    Ok(Step::Busy)
                }
            }
            Err(msg) => {
                self.current = Some((bytes, 0, msg));
                Ok(Step::Blocked(self.dest))
            }
        }
    }
}

/// Outbound DMA stream: one setup latency, then each received chunk occupies
/// the link for `ceil(bytes / width)` cycles. Chunks land in `sink` in order.
pub struct DmaOut<M> {
    bus: BusModel,
    source: ChannelId,
    expected_chunks: usize,
    received: usize,
    busy: u64,
    started: bool,
    sink: Rc<RefCell<Vec<M>>>,
}

impl<M> DmaOut<M> {
    pub fn new(bus: &BusModel, source: ChannelId, expected_chunks: usize, sink: Rc<RefCell<Vec<M>>>) -> Self {
        Self {
            bus: bus.clone(),
            source,
            expected_chunks,
            received: 0,
            busy: 0,
            started: false,
            sink,
        }
    }
}

impl<M: Payload> Process<M> for DmaOut<M> {
    fn name(&self) -> &str {
        "dma_out"
    }

    fn step(&mut self, cx: &mut Ctx<'_, M>) -> Result<Step, SimError> {
        if self.busy > 0 {
            self.busy -= 1;
            if self.busy == 0 && self.received == self.expected_chunks {
                return Ok(Step::Done);
            }
            return Ok(Step::Busy);
        }
        if self.received == self.expected_chunks {
            return Ok(Step::Done);
        }
        let Some(chunk) = cx.try_recv(self.source) else {
            return Ok(Step::Blocked(self.source));
        };
        let bytes = chunk.byte_len() as u64;
        cx.counters().dma_bytes_out += bytes;
        let mut cost = self.bus.streaming_cycles(bytes);
        if !self.started {
            cost += self.bus.setup_cycles;
            self.started = true;
        }
        self.sink.borrow_mut().push(chunk);
        self.received += 1;
        // this cycle is the first beat
        self.busy = cost.saturating_sub(1);
        if self.busy == 0 && self.received == self.expected_chunks {
            Ok(Step::Done)
        } else {
            Ok(Step::Busy)
        }
    }
}
