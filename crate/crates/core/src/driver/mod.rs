//! Host-side driver: lowers convolutions to GEMM, packs operands into the
//! accelerator wire format, plans weight tiles, dispatches work through a
//! modeled CPU/accelerator pipeline and unpacks results.

pub mod im2col;
pub mod pack;
pub mod pipeline;
pub mod plan;
pub mod task;
pub mod unpack;

pub use im2col::{im2col, ConvGeometry};
pub use pack::{pack_config, pack_invocations, pack_operands, AccelSetup, BufferKind, PackedBuffer};
pub use pipeline::{
    batch_rows, dispatch_pipelined, dispatch_with, execute_task, pipeline_makespan, run_gemm, serial_makespan, CycleReport,
    StageCycles, TaskRun,
};
pub use plan::{plan_weight_tiles, TilePlan, WeightTile};
pub use task::GemmTask;
pub use unpack::{unpack_outputs, OutputLayout, Unpacked};
