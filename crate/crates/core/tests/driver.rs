mod common;

use common::{oracle, random_task, requant_oracle, rng};
use gemmsim::accel::AccelConfig;
use gemmsim::driver::{
    dispatch_pipelined, dispatch_with, execute_task, im2col, ConvGeometry, GemmTask,
};
use gemmsim::par::Execution;
use gemmsim::quant::{QuantTensor, RequantParams};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn single_task_elapsed_is_stage_sum() {
    let task = random_task(&mut rng(1), 16, 16, 16);
    let (out, report) = dispatch_pipelined(std::slice::from_ref(&task), &AccelConfig::vm()).unwrap();
    assert_eq!(report.batches, 1);
    assert_eq!(report.elapsed_cycles, report.stage_totals.total());
    assert_eq!(report.pipelined_cycles, report.serial_cycles);
    assert_eq!(out[0].data(), oracle(&task));
}

#[test]
fn two_compute_heavy_tasks_overlap() {
    let mut r = rng(2);
    let tasks = vec![random_task(&mut r, 32, 32, 64), random_task(&mut r, 32, 32, 64)];
    let config = AccelConfig::sa_square(4);
    let (_, single) = dispatch_pipelined(&tasks[..1], &config).unwrap();
    assert!(single.stage_totals.compute >= single.stage_totals.pack + single.stage_totals.unpack);
    let (_, both) = dispatch_pipelined(&tasks, &config).unwrap();
    assert!(both.elapsed_cycles < 2 * single.elapsed_cycles);
}

#[test]
fn serial_and_pipelined_agree_on_outputs() {
    let mut r = rng(3);
    let tasks: Vec<GemmTask> = (0..4).map(|_| random_task(&mut r, 24, 20, 40)).collect();
    for mut config in [AccelConfig::vm(), AccelConfig::sa()] {
        let (piped, p) = dispatch_pipelined(&tasks, &config).unwrap();
        config.driver.pipelined = false;
        let (serial, s) = dispatch_pipelined(&tasks, &config).unwrap();
        assert_eq!(piped, serial);
        assert_eq!(s.elapsed_cycles, s.serial_cycles);
        assert!(p.elapsed_cycles < s.elapsed_cycles);
        let longest_stage = *p.stage_totals.as_array().iter().max().unwrap();
        assert!(p.elapsed_cycles >= longest_stage);
    }
}

#[test]
fn rows_are_batched() {
    let task = random_task(&mut rng(4), 200, 8, 12);
    let run = execute_task(&task, &AccelConfig::vm()).unwrap();
    assert_eq!(run.batches.len(), 4);
    assert_eq!(run.output.data(), oracle(&task));

    let mut config = AccelConfig::sa_square(4);
    config.sa.global_input_buffer_bytes = 12 * 8;
    let run = execute_task(&task, &config).unwrap();
    assert_eq!(run.batches.len(), 25);
    assert_eq!(run.output.data(), oracle(&task));
}

#[test]
fn execution_modes_agree() {
    let mut r = rng(5);
    let tasks: Vec<GemmTask> = (0..12)
        .map(|_| {
            let (m, n, k) = (r.gen_range(1..30), r.gen_range(1..30), r.gen_range(1..30));
            random_task(&mut r, m, n, k)
        })
        .collect();
    let config = AccelConfig::sa_square(8);
    let (a, ra) = dispatch_with(&tasks, &config, Execution::Sequential).unwrap();
    let (b, rb) = dispatch_with(&tasks, &config, Execution::Parallel).unwrap();
    assert_eq!(ra, rb);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.output, y.output);
        assert_eq!(x.batches, y.batches);
    }
}

/// Direct convolution over NHWC input and OHWI filters, requantized per
/// output channel.
#[allow(clippy::too_many_arguments)]
fn direct_conv(
    input: &QuantTensor,
    filters: &[u8],
    filter_zp: u8,
    out_c: usize,
    geom: &ConvGeometry,
    p: &RequantParams,
) -> Vec<u8> {
    let s = input.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = geom.output_dims(h, w).unwrap();
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let izp = input.zero_point() as i64;
    let mut out = Vec::new();
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..out_c {
                    let mut acc = 0i64;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ci in 0..c {
                                let iy = (oy * geom.stride_h + ky) as i64 - geom.pad_top as i64;
                                let ix = (ox * geom.stride_w + kx) as i64 - geom.pad_left as i64;
                                let x = if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    0
                                } else {
                                    input.data()[((n * h + iy as usize) * w + ix as usize) * c + ci] as i64 - izp
                                };
                                let f = filters[((o * kh + ky) * kw + kx) * c + ci] as i64 - filter_zp as i64;
                                acc += x * f;
                            }
                        }
                    }
                    out.push(requant_oracle(acc, p.bias[o], p));
                }
            }
        }
    }
    out
}

#[test]
fn convolution_through_the_accelerator() {
    let mut r = rng(6);
    for case in 0..12 {
        let (h, w, c, o) = (r.gen_range(3..9), r.gen_range(3..9), r.gen_range(1..5), r.gen_range(1..9));
        let k = r.gen_range(1..4);
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..2);
        let input = QuantTensor::new((0..h * w * c).map(|_| r.gen()).collect(), vec![1, h, w, c], 0.1, r.gen()).unwrap();
        let geom = ConvGeometry::new((k, k), stride, pad);
        let filters: Vec<u8> = (0..o * k * k * c).map(|_| r.gen()).collect();
        let fzp: u8 = r.gen();
        let kk = k * k * c;
        let mut rhs = vec![0u8; kk * o];
        for oc in 0..o {
            for i in 0..kk {
                rhs[i * o + oc] = filters[oc * kk + i];
            }
        }
        let mut p = RequantParams::from_scale(0.0007, o, r.gen()).unwrap();
        p.bias = (0..o).map(|_| r.gen_range(-500..500)).collect();
        let patches = im2col(&input, &geom).unwrap();
        let task = GemmTask::new(patches, QuantTensor::new(rhs, vec![kk, o], 0.1, fzp).unwrap(), p.clone(), 0.2).unwrap();
        let expected = direct_conv(&input, &filters, fzp, o, &geom, &p);
        let config = if case % 2 == 0 { AccelConfig::vm() } else { AccelConfig::sa_square(8) };
        assert_eq!(execute_task(&task, &config).unwrap().output.data(), expected, "case {case}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn tiling_is_output_neutral(m in 1usize..40, n in 1usize..60, k in 1usize..120, seed in any::<u64>(),
                                cap_strips in 1usize..6, sa in any::<bool>()) {
        let task = random_task(&mut rng(seed), m, n, k);
        let mut config = if sa { AccelConfig::sa_square(4) } else { AccelConfig::vm() };
        let base = execute_task(&task, &config).unwrap();
        let native = config.native_cols();
        let cap = native * cap_strips * 40;
        config.vm.global_weight_buffer_bytes = cap;
        config.sa.global_weight_buffer_bytes = cap;
        let tiled = execute_task(&task, &config).unwrap();
        prop_assert_eq!(&base.output, &tiled.output);
        prop_assert_eq!(tiled.output.data(), &oracle(&task)[..]);
    }
}
