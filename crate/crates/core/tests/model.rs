mod common;

use std::path::PathBuf;

use gemmsim::accel::AccelConfig;
use gemmsim::driver::{execute_task, im2col};
use gemmsim::model::{
    cpu_reference_layer, fixtures, load_model, lower_to_gemm, random_input, run_inference, Backend, LayerCategory,
    LayerDef, LayerOp, ModelGraph, ModelSpec, Padding, TensorInfo, WeightQuant,
};
use gemmsim::quant::{Activation, QuantTensor};
use gemmsim::Error;
use proptest::prelude::*;
use rand::Rng;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/models")
}

#[test]
fn shipped_fixtures_match_generators() {
    let regen = std::env::var_os("GEMMSIM_REGEN_FIXTURES").is_some();
    for (stem, spec) in fixtures::all() {
        let (json, weights) = (fixture_dir().join(format!("{stem}.json")), fixture_dir().join(format!("{stem}.weights")));
        if regen {
            spec.save(&json, &weights).unwrap();
        }
        let loaded = load_model(&json, &weights).unwrap();
        assert_eq!(loaded, spec, "{stem} differs from its generator");
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fixtures::toy_cnn();
    assert_eq!(spec.layers().len(), 4);
    let (j, w) = (dir.path().join("m.json"), dir.path().join("m.weights"));
    spec.save(&j, &w).unwrap();
    let back = load_model(&j, &w).unwrap();
    assert_eq!(back, spec);
    assert_eq!(std::fs::read(&w).unwrap(), spec.weights_bytes());
}

fn single_conv() -> (ModelGraph, Vec<u8>) {
    let graph = ModelGraph {
        name: "one".into(),
        input: TensorInfo {
            shape: vec![1, 4, 4, 2],
            scale: 0.1,
            zero_point: 10,
        },
        layers: vec![LayerDef {
            name: "c".into(),
            inputs: vec![],
            op: LayerOp::Conv2d {
                filters: 3,
                kernel: [3, 3],
                stride: 1,
                padding: Padding::Valid,
                activation: Activation::None,
                weights: WeightQuant {
                    scale: 0.05,
                    zero_point: 7,
                },
            },
            output: TensorInfo {
                shape: vec![1, 2, 2, 3],
                scale: 0.5,
                zero_point: 100,
            },
        }],
    };
    let weights = (0..3 * 9 * 2 + 3 * 4).map(|i| (i * 37 % 251) as u8).collect();
    (graph, weights)
}

#[test]
fn single_layer_loads() {
    let (graph, weights) = single_conv();
    let spec = ModelSpec::new(graph, &weights).unwrap();
    assert_eq!(spec.layers().len(), 1);
    assert_eq!(spec.params[0].as_ref().unwrap().bias.len(), 3);
}

#[test]
fn short_weights_name_the_layer() {
    let (graph, mut weights) = single_conv();
    weights.pop();
    let err = ModelSpec::new(graph.clone(), &weights).unwrap_err().to_string();
    assert!(err.contains("'c'") && err.contains("too short"), "{err}");
    weights.extend([0, 0]);
    assert!(ModelSpec::new(graph, &weights).unwrap_err().to_string().contains("trailing"));
}

#[test]
fn graph_errors() {
    let (mut graph, weights) = single_conv();
    graph.layers[0].inputs = vec!["nowhere".into()];
    assert!(ModelSpec::new(graph.clone(), &weights).unwrap_err().to_string().contains("dangling"));
    graph.layers[0].inputs.clear();
    graph.layers[0].output.shape = vec![1, 4, 4, 3];
    assert!(ModelSpec::new(graph, &weights).unwrap_err().to_string().contains("shape"));
    assert!(matches!(ModelSpec::from_slices("{\"name\":1}", &[]), Err(Error::Model(_))));
    let spec = fixtures::toy_cnn();
    let mut json: serde_json::Value = serde_json::from_str(&spec.to_json().unwrap()).unwrap();
    json["layers"][1]["output"]["zero_point"] = 5.into();
    let err = ModelSpec::from_slices(&json.to_string(), &spec.weights_bytes()).unwrap_err();
    assert!(err.to_string().contains("pool1"), "{err}");
}

#[test]
fn clamp_only_model() {
    let spec = fixtures::clamp_only(vec![2, 3, 3, 2], 40, 200);
    let input = random_input(&spec, 9).unwrap();
    for backend in Backend::ALL {
        let (out, report) = run_inference(&spec, &input, backend, &AccelConfig::default()).unwrap();
        let want: Vec<u8> = input.data().iter().map(|v| (*v).clamp(40, 200)).collect();
        assert_eq!(out.data(), want.as_slice());
        assert_eq!(report.accelerator_cycles, 0);
        assert_eq!(report.conv_cycles, 0);
    }
}

#[test]
fn avg_pool_of_constant_is_constant() {
    let spec = fixtures::residual_block();
    let gap = spec.layers().iter().position(|l| l.name == "gap").unwrap();
    let info = &spec.input_infos(gap)[0];
    let x = QuantTensor::filled(info.shape.clone(), 77, info.scale, info.zero_point).unwrap();
    let out = cpu_reference_layer(&spec, gap, &[&x]).unwrap();
    assert!(out.data().iter().all(|&v| v == 77));
}

#[test]
fn conv_layers_match_gemm_lowering() {
    for spec in [fixtures::toy_cnn(), fixtures::residual_block()] {
        for (i, layer) in spec.layers().iter().enumerate() {
            if !layer.op.is_gemm() {
                continue;
            }
            let info = &spec.input_infos(i)[0];
            let mut rng = common::rng(i as u64);
            let data = (0..info.len()).map(|_| rng.gen()).collect();
            let x = QuantTensor::new(data, info.shape.clone(), info.scale, info.zero_point).unwrap();
            let direct = cpu_reference_layer(&spec, i, &[&x]).unwrap();
            let task = lower_to_gemm(&spec, i, &x).unwrap();
            assert_eq!(task.reference_output().unwrap().data(), direct.data(), "{}", layer.name);
            assert_eq!(common::oracle(&task), direct.data());
        }
    }
}

#[test]
fn im2col_lowering_shape() {
    let spec = fixtures::toy_cnn();
    let x = random_input(&spec, 1).unwrap();
    let task = lower_to_gemm(&spec, 0, &x).unwrap();
    let geom = Padding::Same.geometry([3, 3], 1, 16, 16);
    assert_eq!(task.lhs, im2col(&x, &geom).unwrap());
    assert_eq!((task.m(), task.k(), task.n()), (256, 27, 8));
}

/// Float reference of a quantized add.
#[allow(clippy::too_many_arguments)]
fn float_add(a: u8, az: u8, as_: f64, b: u8, bz: u8, bs: f64, os: f64, oz: u8) -> f64 {
    let real = as_ * (a as f64 - az as f64) + bs * (b as f64 - bz as f64);
    (real / os + oz as f64).round().clamp(0.0, 255.0)
}

#[test]
fn add_with_mismatched_scales_matches_float() {
    let spec = fixtures::residual_block();
    let sum = spec.layers().iter().position(|l| l.name == "sum").unwrap();
    let infos = spec.input_infos(sum);
    assert_ne!(infos[0].scale, infos[1].scale);
    let out = &spec.layers()[sum].output;
    let mut rng = common::rng(5);
    let mk = |rng: &mut rand_chacha::ChaCha8Rng, i: &TensorInfo| {
        let d = (0..i.len()).map(|_| rng.gen()).collect();
        QuantTensor::new(d, i.shape.clone(), i.scale, i.zero_point).unwrap()
    };
    let (a, b) = (mk(&mut rng, infos[0]), mk(&mut rng, infos[1]));
    let got = cpu_reference_layer(&spec, sum, &[&a, &b]).unwrap();
    for ((&x, &y), &g) in a.data().iter().zip(b.data()).zip(got.data()) {
        let f = float_add(x, a.zero_point(), a.scale(), y, b.zero_point(), b.scale(), out.scale, out.zero_point);
        // relu clamps at the zero point
        let f = f.max(out.zero_point as f64);
        assert!((g as f64 - f).abs() <= 1.0, "{x} + {y}: got {g}, float {f}");
    }
}

#[test]
fn backends_agree_on_fixtures() {
    for (stem, spec) in fixtures::all() {
        for seed in 0..2 {
            let input = random_input(&spec, seed).unwrap();
            let mut digests = Vec::new();
            for backend in Backend::ALL {
                let (out, report) = run_inference(&spec, &input, backend, &AccelConfig::default()).unwrap();
                assert_eq!(report.output_digest, gemmsim::model::tensor_digest(&out));
                digests.push((out, report.output_digest));
            }
            assert!(digests.windows(2).all(|w| w[0] == w[1]), "{stem} seed {seed}");
        }
    }
}

#[test]
fn report_accounting() {
    let spec = fixtures::toy_cnn();
    let input = random_input(&spec, 3).unwrap();
    for backend in Backend::ALL {
        let (_, r) = run_inference(&spec, &input, backend, &AccelConfig::default()).unwrap();
        let total: u64 = r.layers.iter().map(|l| l.elapsed_cycles).sum();
        assert_eq!(r.overall_cycles, total);
        assert_eq!(r.conv_cycles + r.non_conv_cycles, r.overall_cycles);
        let conv: u64 = r
            .layers
            .iter()
            .filter(|l| l.category == LayerCategory::Conv)
            .map(|l| l.elapsed_cycles)
            .sum();
        assert_eq!(conv, r.conv_cycles);
        assert_eq!(r.accelerator_cycles == 0, backend == Backend::Cpu);
        assert!(r.layers.iter().all(|l| l.offloaded == (backend != Backend::Cpu && l.category == LayerCategory::Conv)));
    }
}

#[test]
fn reports_are_deterministic() {
    let spec = fixtures::residual_block();
    let input = random_input(&spec, 11).unwrap();
    let first = serde_json::to_string(&run_inference(&spec, &input, Backend::Sa, &AccelConfig::default()).unwrap().1).unwrap();
    for _ in 0..3 {
        let again = run_inference(&spec, &input, Backend::Sa, &AccelConfig::default()).unwrap().1;
        assert_eq!(serde_json::to_string(&again).unwrap(), first);
    }
}

#[test]
fn wrong_input_shape_rejected() {
    let spec = fixtures::toy_cnn();
    let x = QuantTensor::filled(vec![1, 8, 8, 3], 0, 0.02, 128).unwrap();
    assert!(run_inference(&spec, &x, Backend::Cpu, &AccelConfig::default()).is_err());
}

#[test]
fn gemm_layer_through_driver_matches_reference() {
    let spec = fixtures::compute_bound_conv();
    let x = random_input(&spec, 4).unwrap();
    let task = lower_to_gemm(&spec, 0, &x).unwrap();
    let run = execute_task(&task, &AccelConfig::vm()).unwrap();
    assert_eq!(run.output.data(), cpu_reference_layer(&spec, 0, &[&x]).unwrap().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_inputs_agree_across_backends(seed in any::<u64>()) {
        let spec = fixtures::toy_cnn();
        let input = random_input(&spec, seed).unwrap();
        let cpu = run_inference(&spec, &input, Backend::Cpu, &AccelConfig::default()).unwrap().0;
        for backend in [Backend::Vm, Backend::Sa] {
            let out = run_inference(&spec, &input, backend, &AccelConfig::default()).unwrap().0;
            prop_assert_eq!(out.data(), cpu.data());
        }
    }
}
