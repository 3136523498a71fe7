#![allow(dead_code)]

use gemmsim::driver::GemmTask;
use gemmsim::quant::{QuantTensor, RequantParams};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A task with random operands, zero points, bias and output scale.
pub fn random_task(rng: &mut ChaCha8Rng, m: usize, n: usize, k: usize) -> GemmTask {
    let lhs: Vec<u8> = (0..m * k).map(|_| rng.gen()).collect();
    let rhs: Vec<u8> = (0..k * n).map(|_| rng.gen()).collect();
    let lzp: u8 = rng.gen();
    let rzp: u8 = rng.gen();
    let out_zp: u8 = rng.gen();
    // keep outputs mostly inside the clamp range for a typical accumulator spread
    let scale = 1.0 / (64.0 * (k as f64).sqrt() * 40.0) * rng.gen_range(0.5..2.0);
    let mut requant = RequantParams::from_scale(scale, n, out_zp).unwrap();
    requant.bias = (0..n).map(|_| rng.gen_range(-20_000..20_000)).collect();
    GemmTask::new(
        QuantTensor::new(lhs, vec![m, k], 0.02, lzp).unwrap(),
        QuantTensor::new(rhs, vec![k, n], 0.01, rzp).unwrap(),
        requant,
        0.05,
    )
    .unwrap()
}

/// Independent oracle: i64 dot products and a from-scratch fixed-point
/// requantization in i128 arithmetic.
pub fn oracle(task: &GemmTask) -> Vec<u8> {
    let (m, n, k) = (task.m(), task.n(), task.k());
    let a = task.lhs.data();
    let b = task.rhs.data();
    let (za, zb) = (task.lhs.zero_point() as i64, task.rhs.zero_point() as i64);
    let p = &task.requant;
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        for c in 0..n {
            let mut acc = 0i64;
            for i in 0..k {
                acc += (a[r * k + i] as i64 - za) * (b[i * n + c] as i64 - zb);
            }
            out.push(requant_oracle(acc, p.bias[c], p));
        }
    }
    out
}

pub fn requant_oracle(acc: i64, bias: i32, p: &RequantParams) -> u8 {
    let x = (acc + bias as i64).clamp(i32::MIN as i64, i32::MAX as i64) as i128;
    let prod = 2 * x * p.multiplier as i128;
    let high = if prod == 1i128 << 63 { i32::MAX as i128 } else { prod >> 32 };
    let scaled = if p.right_shift == 0 {
        high
    } else {
        let d = 1i128 << p.right_shift;
        let q = high.abs() * 2 + d;
        let mag = q / (2 * d);
        if high < 0 {
            -mag
        } else {
            mag
        }
    };
    (scaled + p.output_zero_point as i128).clamp(p.clamp_min as i128, p.clamp_max as i128) as u8
}
