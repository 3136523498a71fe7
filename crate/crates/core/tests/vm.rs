mod common;

use common::{oracle, random_task, rng};
use gemmsim::accel::{input_handler_route, run_accelerator, AccelConfig};
use gemmsim::driver::{execute_task, pack_invocations, plan_weight_tiles, GemmTask};
use proptest::prelude::*;
use rand::Rng;

fn single_invocation(task: &GemmTask, config: &AccelConfig) -> Vec<gemmsim::driver::PackedBuffer> {
    let plan = plan_weight_tiles(task.m(), task.n(), task.k(), config).unwrap();
    let mut inv = pack_invocations(task, &plan, config).unwrap();
    assert_eq!(inv.len(), 1);
    inv.remove(0)
}

#[test]
fn single_tile_k4_cycles_and_macs() {
    let task = random_task(&mut rng(1), 4, 4, 4);
    let config = AccelConfig::vm();
    let run = run_accelerator(&single_invocation(&task, &config), &config).unwrap();
    assert_eq!(run.counters.component_cycles["gemm_unit0"], 1 + 2);
    assert_eq!(run.counters.mac_ops_issued, 64);
    assert_eq!(run.compute_window, 3);
    assert_eq!(run.stream, oracle(&task));
}

#[test]
fn single_tile_routing() {
    let task = random_task(&mut rng(2), 4, 4, 4);
    let config = AccelConfig::vm();
    let report = input_handler_route(&single_invocation(&task, &config), &config).unwrap();
    assert_eq!(report.global_weight_bytes, vec![16]);
    assert_eq!(report.unit_input_bytes, vec![16, 0, 0, 0]);
}

#[test]
fn eight_by_eight_matches_oracle() {
    let task = random_task(&mut rng(3), 8, 8, 8);
    let run = execute_task(&task, &AccelConfig::vm()).unwrap();
    assert_eq!(run.output.data(), oracle(&task));
}

#[test]
fn broadcast_reads_one_quarter_of_naive() {
    let task = random_task(&mut rng(4), 4, 4, 4);
    let mut config = AccelConfig::vm();
    let bufs = single_invocation(&task, &config);
    let on = run_accelerator(&bufs, &config).unwrap();
    config.vm.broadcast_enabled = false;
    let off = run_accelerator(&bufs, &config).unwrap();
    // one 4-column strip of depth 4 is 4 words
    assert_eq!(on.counters.global_weight_buffer_reads, 4);
    assert_eq!(off.counters.global_weight_buffer_reads, 16);
    assert_eq!(on.stream, off.stream);

    let task = random_task(&mut rng(5), 32, 40, 24);
    let mut config = AccelConfig::vm();
    let on = execute_task(&task, &config).unwrap();
    config.vm.broadcast_enabled = false;
    let off = execute_task(&task, &config).unwrap();
    assert_eq!(off.counters.global_weight_buffer_reads, 4 * on.counters.global_weight_buffer_reads);
    assert_eq!(on.output, off.output);
    assert!(off.accel_cycles >= on.accel_cycles);
}

#[test]
fn ppu_cuts_output_bytes_by_four() {
    let task = random_task(&mut rng(6), 16, 16, 16);
    let mut config = AccelConfig::vm();
    let on = run_accelerator(&single_invocation(&task, &config), &config).unwrap();
    config.vm.ppu_enabled = false;
    let off = run_accelerator(&single_invocation(&task, &config), &config).unwrap();
    assert_eq!(on.stream.len(), 256);
    assert_eq!(off.stream.len(), 1024);
    assert_eq!(on.counters.dma_bytes_out * 4, off.counters.dma_bytes_out);
    // disabling the PPU moves requantization to the host, not the result
    assert_eq!(execute_task(&task, &config).unwrap().output.data(), oracle(&task));
}

#[test]
fn weight_capacity_forces_tiles_without_changing_results() {
    let task = random_task(&mut rng(7), 12, 64, 32);
    let base = execute_task(&task, &AccelConfig::vm()).unwrap();
    let mut small = AccelConfig::vm();
    small.vm.global_weight_buffer_bytes = 4 * 32 * 3;
    let tiled = execute_task(&task, &small).unwrap();
    assert!(tiled.plan.tiles.len() > 1);
    assert_eq!(base.output, tiled.output);
    assert_eq!(tiled.output.data(), oracle(&task));
}

#[test]
fn k_split_sums_on_host() {
    let task = random_task(&mut rng(8), 9, 10, 100);
    let mut config = AccelConfig::vm();
    config.vm.local_weight_tile_bytes = 4 * 30;
    let run = execute_task(&task, &config).unwrap();
    assert_eq!(run.plan.k_ranges.len(), 4);
    assert_eq!(run.output.data(), oracle(&task));
}

#[test]
fn invariants_hold_on_random_work() {
    let mut r = rng(9);
    for _ in 0..20 {
        let (m, n, k) = (r.gen_range(1..40), r.gen_range(1..40), r.gen_range(1..60));
        let task = random_task(&mut r, m, n, k);
        let config = AccelConfig::vm();
        let run = execute_task(&task, &config).unwrap();
        assert_eq!(run.counters.partial_sum_bytes_out, 0);
        assert!(run.counters.mac_ops_issued <= config.num_pes() * run.accel_cycles);
        assert_eq!(run.output.data(), oracle(&task));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn vm_matches_oracle(m in 1usize..30, n in 1usize..30, k in 1usize..50, seed in any::<u64>(),
                         broadcast in any::<bool>(), ppu in any::<bool>()) {
        let task = random_task(&mut rng(seed), m, n, k);
        let mut config = AccelConfig::vm();
        config.vm.broadcast_enabled = broadcast;
        config.vm.ppu_enabled = ppu;
        let run = execute_task(&task, &config).unwrap();
        prop_assert_eq!(run.output.data(), &oracle(&task)[..]);
    }
}
