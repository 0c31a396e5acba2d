use std::time::Instant;

use nqe::activation::{hwmsb_integer, ReferencePosition};
use nqe::integer::{lower, lower_with, pixels_tensor, unpack_mantissas, IntOp, LowerOptions, OpCounter};
use nqe::model::{Nqe, Output};
use nqe::topology::{BottleneckKind, ModelConfig, Precision};
use nqe::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A folded model with random weights, biases and normalization scales (some
/// negative, so folding also flips channels).
fn random_folded(config: ModelConfig, seed: u64) -> Nqe {
    let mut m = Nqe::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        let name = m.params().name(id).to_string();
        let t = m.params_mut().get_mut(id);
        if name.ends_with(".gamma") {
            for v in t.data_mut() {
                let mag = 2f32.powf(rng.random_range(-4.0..4.0));
                *v = if rng.random_bool(0.2) { -mag } else { mag };
            }
        } else if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    m.fold_normalization().unwrap();
    m
}

fn random_pixels(n: usize, size: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * size * size * 3).map(|_| rng.random()).collect()
}

fn first_argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Compares the integer path with the real-valued evaluation forward, 100
/// inputs at a time.
fn check_equivalence(model: &Nqe, pixels: &[u8], n: usize) {
    let im = lower(model).unwrap();
    let s = model.config().input_size;
    let classes = model.config().classes;
    let bits = model.config().code_bits();
    let (mut ones, mut total) = (0, 0);
    for (chunk, px) in pixels.chunks(100 * s * s * 3).enumerate() {
        let m = px.len() / (s * s * 3);
        let x = pixels_tensor(px, &[m, s, s, 3]).unwrap();
        let (code, logits) = im.forward_with_code(px, m).unwrap();
        let trace = model.trace(&x, Output::Logits).unwrap();
        let reference_code = &trace[model.topology().encoder_len - 1].1;
        let reference_logits = &trace.last().unwrap().1;

        assert_eq!(code.len(), m * bits);
        let mismatched = code.iter().zip(reference_code.data()).filter(|(&a, &b)| a as f32 != b).count();
        assert_eq!(mismatched, 0, "code bits differ in chunk {chunk}");
        ones += code.iter().filter(|&&b| b == 1).count();
        total += code.len();

        for (i, row) in reference_logits.data().chunks(classes).enumerate() {
            let int_row: Vec<f32> = logits[i * classes..(i + 1) * classes].iter().map(|&v| v as f32).collect();
            assert_eq!(first_argmax(&int_row), first_argmax(row), "argmax of input {}", chunk * 100 + i);
        }
    }
    assert_eq!(total, n * bits);
    assert!(ones > 0 && ones < total, "codes are constant");
}

#[test]
fn toy_models_match_the_real_valued_forward() {
    for (precision, bottleneck) in [
        (Precision::Mixed, BottleneckKind::Dwconv),
        (Precision::Binary, BottleneckKind::Dwconv),
        (Precision::Mixed, BottleneckKind::Lfc),
        (Precision::Mixed, BottleneckKind::Rcs),
    ] {
        let config = ModelConfig {
            precision,
            bottleneck,
            ..ModelConfig::toy(10)
        };
        let model = random_folded(config, 11);
        check_equivalence(&model, &random_pixels(1000, 8, 3), 1000);
    }
}

#[test]
fn full_topology_matches_the_real_valued_forward() {
    let start = Instant::now();
    let model = random_folded(ModelConfig::full(64), 7);
    check_equivalence(&model, &random_pixels(1000, 32, 5), 1000);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "took {elapsed:.1} s");
}

/// Every uniform image of every channel level: 256 grey levels per channel
/// on top of a zero background.
#[test]
fn exhaustive_uniform_inputs_match() {
    let model = random_folded(ModelConfig::toy(4), 21);
    let mut pixels = Vec::new();
    for c in 0..3 {
        for level in 0..=255u8 {
            for i in 0..8 * 8 * 3 {
                pixels.push(if i % 3 == c { level } else { 0 });
            }
        }
    }
    check_equivalence(&model, &pixels, 3 * 256);
}

#[test]
fn absorption_does_not_change_any_bit() {
    let model = random_folded(ModelConfig::toy(10), 4);
    let absorbed = lower_with(&model, LowerOptions { absorb_bsn: true }).unwrap();
    let explicit = lower_with(&model, LowerOptions { absorb_bsn: false }).unwrap();
    assert!(explicit.layers.iter().any(|l| matches!(l.op, IntOp::Shift { .. })));
    assert!(!absorbed.layers.iter().any(|l| matches!(l.op, IntOp::Shift { .. })));
    let pixels = random_pixels(300, 8, 9);
    for output in [Output::Code, Output::Logits] {
        assert_eq!(
            absorbed.forward(&pixels, 300, output).unwrap(),
            explicit.forward(&pixels, 300, output).unwrap()
        );
    }
}

#[test]
fn hand_computed_quinary_filter() {
    // Single 3×3 quinary filter over a 3×3 single-channel patch, centre output.
    // Weights (values): 0.5·[2, 1, 0; -1, -2, 1; 0, 1, 2]; codes are 2v.
    let codes = [2, 1, 0, -1, -2, 1, 0, 1, 2];
    let patch = [10, 20, 30, 40, 50, 60, 70, 80, 90];
    // 20 + 20 + 0 - 40 - 100 + 60 + 0 + 80 + 180 = 220 on the 2^-9 grid.
    let acc: i32 = codes.iter().zip(patch).map(|(c, p)| c * p).sum();
    assert_eq!(acc, 220);
    let x: Vec<i32> = patch.to_vec();
    let geom = nqe::ops::ConvGeom::square(3, 0);
    let (y, dims) = nqe::ops::conv2d_raw(&x, [1, 3, 3, 1], &codes, 1, &geom).unwrap();
    assert_eq!(dims, [1, 1, 1, 1]);
    assert_eq!(y, vec![220]);
    // Real value: sum of v·p/256 = 220 / 512.
    let real: f64 = codes.iter().zip(patch).map(|(&c, p)| c as f64 * 0.5 * p as f64 / 256.0).sum();
    assert_eq!(real, 220.0 / 512.0);
}

#[test]
fn reported_widths() {
    let im = lower(&random_folded(ModelConfig::full(64), 1)).unwrap();
    let widths = im.report_widths();
    let row = |name: &str| widths.iter().find(|r| r.layer == name).unwrap().clone();
    // conv5: binary 3×3 over 256 channels.
    let conv5 = row("conv5");
    assert!(conv5.accumulator_bits.unwrap() <= 13);
    assert_eq!(row("conv2.hwmsb").storage_bits, 2);
    assert_eq!(row("conv4.hwmsb").storage_bits, 2);
    assert_eq!(row("gconv.heaviside").storage_bits, 1);
    assert_eq!(row("bottleneck.heaviside").storage_bits, 1);
    // width ≥ ceil(log2(fan_in · max|w| · max|a|)) + 1 for every accumulator.
    let topo = nqe::topology::topology(&ModelConfig::full(64)).unwrap();
    for (i, l) in im.layers.iter().enumerate() {
        if let IntOp::Conv { weights, .. } | IntOp::Dense { weights } = &l.op {
            let spec = topo.layers.iter().find(|s| s.name == l.name).unwrap();
            let a = if i == 0 { 255.0 } else { im.layers[i - 1].max_abs as f64 };
            let bound = (spec.fan_in() as f64 * weights.max_code().max(1) as f64 * a).log2().ceil() as u32 + 1;
            assert!(l.bits >= bound, "{}: {} < {bound}", l.name, l.bits);
        }
    }
}

#[test]
fn counter_sees_only_integer_work() {
    let model = random_folded(ModelConfig::toy(10), 8);
    let im = lower(&model).unwrap();
    let mut counter = OpCounter::default();
    im.forward_counted(&random_pixels(2, 8, 1), 2, Output::Logits, &mut counter).unwrap();
    assert_eq!(counter.layers.len(), im.layers.len());
    let macs: u64 = model.topology().layers.iter().map(|l| l.macs()).sum();
    assert_eq!(counter.total().macs, 2 * macs);
    let (_, logits) = im.forward_with_code(&random_pixels(2, 8, 1), 2).unwrap();
    let predicted = im.classify(&random_pixels(2, 8, 1), 2).unwrap();
    for (row, p) in logits.chunks(10).zip(predicted) {
        let as_f32: Vec<f32> = row.iter().map(|&v| v as f32).collect();
        assert_eq!(first_argmax(&as_f32), p);
    }
}

#[test]
fn trace_records_decode_to_forward_values() {
    let model = random_folded(ModelConfig::toy(10), 2);
    let im = lower(&model).unwrap();
    let pixels = random_pixels(1, 8, 4);
    let trace = im.trace(&pixels, 1, Output::Code).unwrap();
    assert_eq!(trace.len(), im.encoder_len);
    let last = trace.last().unwrap();
    assert_eq!(last.bits, 1);
    let bits = unpack_mantissas(&last.packed, 1, model.config().code_bits()).unwrap();
    let code = im.forward(&pixels, 1, Output::Code).unwrap();
    // 1-bit records are unsigned: the sign-extended `-1` stands for 1.
    assert_eq!(bits.iter().map(|&b| (b != 0) as i32).collect::<Vec<_>>(), code);
    let json = serde_json::to_string(&trace[0]).unwrap();
    assert_eq!(serde_json::from_str::<nqe::integer::TraceRecord>(&json).unwrap(), trace[0]);
}

#[test]
fn shift_feeding_hwmsb_moves_the_reference() {
    let model = random_folded(ModelConfig::toy(10), 6);
    let im = lower(&model).unwrap();
    for d in im.bsn.iter().filter(|d| d.elision == "AbsorbIntoHwmsb") {
        let hw = d.layer.replace(".norm", ".hwmsb");
        let layer = im.layers.iter().find(|l| l.name == hw).unwrap();
        let IntOp::Hwmsb { reference, .. } = layer.op else { panic!() };
        assert_eq!(reference.bias, 4 + d.shift_exp);
    }
}

proptest! {
    #[test]
    fn or_pooling_commutes_with_heaviside(values in prop::collection::vec(-50i32..50, 16)) {
        let h = |v: &[i32]| v.iter().map(|&x| (x > 0) as i32).collect::<Vec<_>>();
        let (pooled, _, dims) = nqe::ops::maxpool2_raw(&values, [1, 4, 4, 1]).unwrap();
        let (or_pooled, _, _) = nqe::ops::maxpool2_raw(&h(&values), [1, 4, 4, 1]).unwrap();
        prop_assert_eq!(dims, [1, 2, 2, 1]);
        prop_assert_eq!(h(&pooled), or_pooled);
    }

    #[test]
    fn absorbed_shift_equals_prescaled_input(acc in 1i64..1 << 20, scale in -12i32..0, shift in -8i32..8) {
        let absorbed = hwmsb_integer(acc, scale, ReferencePosition::default().absorb(shift));
        let explicit = hwmsb_integer(acc, scale + shift, ReferencePosition::default());
        prop_assert_eq!(absorbed, explicit);
    }
}

#[test]
fn tensor_helpers_reject_off_grid_values() {
    let t = Tensor::full(&[1, 8, 8, 3], 0.3);
    assert!(nqe::integer::tensor_pixels(&t).is_err());
}
