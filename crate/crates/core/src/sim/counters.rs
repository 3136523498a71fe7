use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

/// Global activity counters collected during a simulation run.
///
/// Buffer reads are counted in 32-bit words. `pe_active_cycles` sums, over
/// every MAC lane, the cycles in which that lane performed a multiply.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleCounters {
    pub component_cycles: BTreeMap<String, u64>,
    pub stall_cycles: u64,
    pub dma_bytes_in: u64,
    pub dma_bytes_out: u64,
    pub global_weight_buffer_reads: u64,
    pub global_input_buffer_reads: u64,
    pub local_buffer_reads: u64,
    pub mac_ops_issued: u64,
    pub pe_active_cycles: u64,
    pub partial_sum_bytes_out: u64,
    pub bank_writes: Vec<u64>,
}

impl CycleCounters {
    pub fn add_component(&mut self, name: &str, cycles: u64) {
        *self.component_cycles.entry(name.to_string()).or_default() += cycles;
    }

    pub fn record_bank_write(&mut self, bank: usize, words: u64) {
        if self.bank_writes.len() <= bank {
            self.bank_writes.resize(bank + 1, 0);
        }
        self.bank_writes[bank] += words;
    }

    /// Fraction of MAC lane-cycles that did useful work.
    pub fn pe_utilization(&self, num_pes: u64, cycles: u64) -> f64 {
        if num_pes == 0 || cycles == 0 {
            return 0.0;
        }
        self.pe_active_cycles as f64 / (num_pes * cycles) as f64
    }
}

impl AddAssign<&CycleCounters> for CycleCounters {
    fn add_assign(&mut self, rhs: &CycleCounters) {
        for (k, v) in &rhs.component_cycles {
            *self.component_cycles.entry(k.clone()).or_default() += v;
        }
        self.stall_cycles += rhs.stall_cycles;
        self.dma_bytes_in += rhs.dma_bytes_in;
        self.dma_bytes_out += rhs.dma_bytes_out;
        self.global_weight_buffer_reads += rhs.global_weight_buffer_reads;
        self.global_input_buffer_reads += rhs.global_input_buffer_reads;
        self.local_buffer_reads += rhs.local_buffer_reads;
        self.mac_ops_issued += rhs.mac_ops_issued;
        self.pe_active_cycles += rhs.pe_active_cycles;
        self.partial_sum_bytes_out += rhs.partial_sum_bytes_out;
        for (bank, &w) in rhs.bank_writes.iter().enumerate() {
            self.record_bank_write(bank, w);
        }
    }
}
