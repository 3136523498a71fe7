use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::BusModel;

/// Which accelerator design a config describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    #[default]
    Vm,
    Sa,
}

/// Vector-MAC design: GEMM units producing 4x4 output tiles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmConfig {
    pub num_gemm_units: usize,
    pub macs_per_output: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub global_weight_buffer_bytes: usize,
    /// Per GEMM unit.
    pub local_input_buffer_bytes: usize,
    /// Per GEMM unit; holds the active 4-column weight tile.
    pub local_weight_tile_bytes: usize,
    pub num_banks: usize,
    pub adder_tree_latency_cycles: u64,
    /// Cycles per 4x4 tile.
    pub ppu_latency_cycles: u64,
    pub ppu_enabled: bool,
    pub broadcast_enabled: bool,
}

impl Default for VmConfig {
    fn default() -> Self {
        Self {
            num_gemm_units: 4,
            macs_per_output: 4,
            tile_rows: 4,
            tile_cols: 4,
            global_weight_buffer_bytes: 64 * 1024,
            local_input_buffer_bytes: 16 * 1024,
            local_weight_tile_bytes: 4 * 1024,
            num_banks: 4,
            adder_tree_latency_cycles: 2,
            ppu_latency_cycles: 4,
            ppu_enabled: true,
            broadcast_enabled: true,
        }
    }
}

impl VmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_rows != 4 || self.tile_cols != 4 {
            return Err(Error::Config("vm tile_dims are fixed at 4x4".into()));
        }
        let positive = [
            ("num_gemm_units", self.num_gemm_units),
            ("macs_per_output", self.macs_per_output),
            ("global_weight_buffer_bytes", self.global_weight_buffer_bytes),
            ("local_input_buffer_bytes", self.local_input_buffer_bytes),
            ("local_weight_tile_bytes", self.local_weight_tile_bytes),
            ("num_banks", self.num_banks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("vm.{name} must be positive")));
            }
        }
        if self.ppu_latency_cycles == 0 {
            return Err(Error::Config("vm.ppu_latency_cycles must be positive".into()));
        }
        Ok(())
    }
}

/// Systolic-array design: an R x C output-stationary MAC grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaConfig {
    pub rows: usize,
    pub cols: usize,
    pub num_queues: usize,
    pub queue_depth: usize,
    pub global_input_buffer_bytes: usize,
    pub global_weight_buffer_bytes: usize,
    pub num_banks: usize,
    pub ppu_enabled: bool,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 16,
            num_queues: 32,
            queue_depth: 8,
            global_input_buffer_bytes: 64 * 1024,
            global_weight_buffer_bytes: 64 * 1024,
            num_banks: 4,
            ppu_enabled: true,
        }
    }
}

impl SaConfig {
    /// A square array of `size` with the matching queue count.
    pub fn square(size: usize) -> Self {
        Self {
            rows: size,
            cols: size,
            num_queues: 2 * size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("sa rows and cols must be positive".into()));
        }
        if self.num_queues != self.rows + self.cols {
            return Err(Error::Config(format!(
                "sa.num_queues ({}) must equal rows + cols ({})",
                self.num_queues,
                self.rows + self.cols
            )));
        }
        let positive = [
            ("queue_depth", self.queue_depth),
            ("global_input_buffer_bytes", self.global_input_buffer_bytes),
            ("global_weight_buffer_bytes", self.global_weight_buffer_bytes),
            ("num_banks", self.num_banks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("sa.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Host-side driver cost model and pipelining knobs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverConfig {
    /// Modeled CPU throughput for packing, unpacking and elementwise work.
    pub cpu_bytes_per_cycle: u64,
    /// Modeled CPU throughput for multiply-accumulates.
    pub cpu_macs_per_cycle: u64,
    /// Upper bound on GEMM rows per dispatched batch.
    pub max_batch_rows: usize,
    /// Memory-mapped buffer sets shared between pipeline stages.
    pub pipeline_buffers: usize,
    pub pipelined: bool,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            cpu_bytes_per_cycle: 4,
            cpu_macs_per_cycle: 2,
            max_batch_rows: 64,
            pipeline_buffers: 2,
            pipelined: true,
        }
    }
}

impl DriverConfig {
    pub fn cpu_cycles_for_bytes(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.cpu_bytes_per_cycle)
    }

    pub fn cpu_cycles_for_macs(&self, macs: u64) -> u64 {
        macs.div_ceil(self.cpu_macs_per_cycle)
    }
}

/// Full parameterization of a candidate design.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccelConfig {
    pub kind: DesignKind,
    pub vm: VmConfig,
    pub sa: SaConfig,
    pub bus: BusModel,
    pub driver: DriverConfig,
}

impl AccelConfig {
    pub fn vm() -> Self {
        Self {
            kind: DesignKind::Vm,
            ..Self::default()
        }
    }

    pub fn sa() -> Self {
        Self {
            kind: DesignKind::Sa,
            ..Self::default()
        }
    }

    pub fn sa_square(size: usize) -> Self {
        Self {
            kind: DesignKind::Sa,
            sa: SaConfig::square(size),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bus.validate().map_err(Error::Config)?;
        if self.driver.cpu_bytes_per_cycle == 0 || self.driver.cpu_macs_per_cycle == 0 {
            return Err(Error::Config("driver cpu throughputs must be positive".into()));
        }
        if self.driver.max_batch_rows == 0 || self.driver.pipeline_buffers == 0 {
            return Err(Error::Config(
                "driver max_batch_rows and pipeline_buffers must be positive".into(),
            ));
        }
        match self.kind {
            DesignKind::Vm => self.vm.validate(),
            DesignKind::Sa => self.sa.validate(),
        }
    }

    /// Output-column width of one native weight tile.
    pub fn native_cols(&self) -> usize {
        match self.kind {
            DesignKind::Vm => self.vm.tile_cols,
            DesignKind::Sa => self.sa.cols,
        }
    }

    /// Row height of one native input block.
    pub fn native_rows(&self) -> usize {
        match self.kind {
            DesignKind::Vm => self.vm.tile_rows,
            DesignKind::Sa => self.sa.rows,
        }
    }

    pub fn global_weight_buffer_bytes(&self) -> usize {
        match self.kind {
            DesignKind::Vm => self.vm.global_weight_buffer_bytes,
            DesignKind::Sa => self.sa.global_weight_buffer_bytes,
        }
    }

    pub fn ppu_enabled(&self) -> bool {
        match self.kind {
            DesignKind::Vm => self.vm.ppu_enabled,
            DesignKind::Sa => self.sa.ppu_enabled,
        }
    }

    pub fn set_ppu_enabled(&mut self, on: bool) {
        match self.kind {
            DesignKind::Vm => self.vm.ppu_enabled = on,
            DesignKind::Sa => self.sa.ppu_enabled = on,
        }
    }

    /// Number of MAC lanes in the compute fabric.
    pub fn num_pes(&self) -> u64 {
        match self.kind {
            DesignKind::Vm => {
                (self.vm.num_gemm_units * self.vm.tile_rows * self.vm.tile_cols * self.vm.macs_per_output)
                    as u64
            }
            DesignKind::Sa => (self.sa.rows * self.sa.cols) as u64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        AccelConfig::vm().validate().unwrap();
        AccelConfig::sa().validate().unwrap();
        for s in [4, 8, 16] {
            AccelConfig::sa_square(s).validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_queue_count() {
        let mut c = AccelConfig::sa();
        c.sa.num_queues = 31;
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c: AccelConfig = serde_json::from_str(r#"{"kind":"sa","sa":{"rows":8,"cols":8,"num_queues":16}}"#).unwrap();
        assert_eq!(c.sa.queue_depth, 8);
        assert_eq!(c.bus, BusModel::default());
        c.validate().unwrap();
        assert!(serde_json::from_str::<AccelConfig>(r#"{"bogus":1}"#).is_err());
    }
}
