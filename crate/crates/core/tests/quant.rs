mod common;

use proptest::prelude::*;
use rand::Rng;
use tinylora::model::{init_weights, ModelConfig};
use tinylora::quant::{self, BaseQuant, Scheme, NF4_CODEBOOK};
use tinylora::tensor::Tensor;

fn random_tensor(seed: u64, shape: &[usize], spread: f32) -> Tensor {
    let mut rng = common::rng(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let scale = 10f32.powf(rng.random_range(-spread..spread));
            rng.random_range(-1.0f32..1.0) * scale
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Nearest level by exhaustive search; ties keep the lower index.
fn brute_nf4(v: f32) -> i32 {
    let mut best = 0;
    for i in 1..16 {
        if (v - NF4_CODEBOOK[i]).abs() < (v - NF4_CODEBOOK[best]).abs() {
            best = i;
        }
    }
    best as i32
}

fn block_absmax(x: &[f32], block: usize, i: usize) -> f32 {
    let b = i / block;
    x[b * block..((b + 1) * block).min(x.len())].iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

#[test]
fn int8_error_bound_on_a_million_elements() {
    let x = random_tensor(1, &[1000, 1000], 2.0);
    let q = quant::quantize_int8(&x, 64).unwrap();
    let d = quant::dequantize(&q);
    let worst = x
        .data()
        .iter()
        .zip(d.data())
        .enumerate()
        .map(|(i, (a, b))| (a - b).abs() - (block_absmax(x.data(), 64, i) / 254.0 + 1e-7))
        .fold(f32::MIN, f32::max);
    assert!(worst <= 0.0, "bound exceeded by {worst}");
}

#[test]
fn int8_worked_block() {
    let x = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 2.0]).unwrap();
    let q = quant::quantize_int8(&x, 4).unwrap();
    assert_eq!(q.block_scales(), &[2.0 / 127.0]);
    assert_eq!((0..4).map(|i| q.code(i)).collect::<Vec<_>>(), vec![64, -127, 32, 127]);
}

#[test]
fn nf4_codes_equal_brute_force_oracle() {
    for seed in 0..20 {
        let x = random_tensor(seed, &[64 * 16], 1.0);
        let q = quant::quantize_nf4(&x, 64, false).unwrap();
        for (i, &v) in x.data().iter().enumerate() {
            let m = block_absmax(x.data(), 64, i);
            let want = if m == 0.0 { 7 } else { brute_nf4(v / m) };
            assert_eq!(q.code(i), want, "seed {seed} element {i}");
        }
    }
}

#[test]
fn nf4_error_bound() {
    let x = random_tensor(3, &[128, 96], 1.5);
    for dq in [false, true] {
        let q = quant::quantize_nf4(&x, 64, dq).unwrap();
        let d = quant::dequantize(&q);
        let half_gap = quant::nf4_max_gap() / 2.0;
        for (i, (a, b)) in x.data().iter().zip(d.data()).enumerate() {
            let m = block_absmax(x.data(), 64, i);
            let slack = (m - q.block_scales()[i / 64]).abs() + 1e-6;
            assert!((a - b).abs() <= half_gap * m + slack, "{i}: {a} vs {b}");
        }
    }
}

#[test]
fn qmatmul_is_bitwise_dequantize_then_matmul() {
    let mut rng = common::rng(77);
    for case in 0..100u64 {
        let (m, k, n) = (rng.random_range(1..9), rng.random_range(1..70), rng.random_range(1..70));
        let x = random_tensor(1000 + case, &[m, k], 0.5);
        let w = random_tensor(2000 + case, &[k, n], 0.5);
        let scheme = if case % 2 == 0 { Scheme::Int8Absmax } else { Scheme::Nf4 };
        let block = [16, 32, 64][case as usize % 3];
        let q = quant::quantize(&w, scheme, block, case % 4 == 1, "w").unwrap();
        let got = quant::qmatmul(&x, &q).unwrap();
        let want = x.matmul(&quant::dequantize(&q)).unwrap();
        assert_eq!(
            got.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            want.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "case {case}"
        );
    }
}

#[test]
fn compression_ratios() {
    let cfg = ModelConfig::toy(512);
    let w = init_weights(&cfg, 0).unwrap();
    let r = quant::memory_report(&w, 64);
    let int8 = r.compression_ratio(BaseQuant::Int8);
    let nf4 = r.compression_ratio(BaseQuant::Nf4);
    assert!(int8 > 3.7 && int8 < 4.0, "{int8}");
    assert!(nf4 > 7.0 && nf4 < 8.0, "{nf4}");
    for t in &r.tensors {
        if t.int8_bytes != t.f32_bytes {
            let ratio = t.f32_bytes as f64 / t.int8_bytes as f64;
            assert!(ratio > 3.7 && ratio < 4.0, "{}: {ratio}", t.name);
        }
    }
    let q = quant::quantize_weights(&w, Scheme::Nf4, 64).unwrap();
    assert_eq!(quant::memory_report(&q, 64), r);
    assert_eq!(q.origin_fingerprint(), w.fingerprint());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blocks_quantize_independently(seed in 0u64..1_000_000, blocks in 1usize..6, int8 in any::<bool>()) {
        let block = 16;
        let x = random_tensor(seed, &[blocks * block], 1.0);
        let scheme = if int8 { Scheme::Int8Absmax } else { Scheme::Nf4 };
        let whole = quant::quantize(&x, scheme, block, false, "").unwrap();
        prop_assert_eq!(&whole, &quant::quantize(&x, scheme, block, false, "").unwrap());
        let deq = quant::dequantize(&whole);
        for b in 0..blocks {
            let part = Tensor::new(vec![block], x.data()[b * block..(b + 1) * block].to_vec()).unwrap();
            let q = quant::quantize(&part, scheme, block, false, "").unwrap();
            let dq = quant::dequantize(&q);
            prop_assert_eq!(dq.data(), &deq.data()[b * block..(b + 1) * block]);
        }
    }

    #[test]
    fn int8_round_trip_bound(seed in 0u64..1_000_000, len in 1usize..300, block in 1usize..80) {
        let x = random_tensor(seed, &[len], 3.0);
        let q = quant::quantize_int8(&x, block).unwrap();
        let d = quant::dequantize(&q);
        for (i, (a, b)) in x.data().iter().zip(d.data()).enumerate() {
            prop_assert!((a - b).abs() <= block_absmax(x.data(), block, i) / 254.0 + 1e-7);
        }
    }
}
