//! Finite-difference gradient checks against the double-precision oracles.

use std::sync::Arc;

use tinylora::lora::{self, LoraConfig, Mode};
use tinylora::model::{forward_traced, init_weights, ModelConfig, ModelRef, WeightTensor};
use tinylora::quant;
use tinylora::tensor::{causal_attention, Tape, Tensor, Var};

use super::*;

pub const STEP: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-9;

type TapeFn = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>;
type RefFn = dyn Fn(&[Vec<f64>]) -> Vec<f64>;

/// Max relative error between tape gradients of `sum(w ⊙ f(inputs))` and
/// central differences of the same objective on the reference `g`.
pub fn check_op(inputs: &[(Vec<usize>, Vec<f32>)], f: &TapeFn, g: &RefFn, seed: u64) -> f64 {
    let tape = Tape::new();
    let tensors: Vec<Tensor> = inputs
        .iter()
        .map(|(s, d)| Tensor::new(s.clone(), d.clone()).unwrap().with_requires_grad(true))
        .collect();
    let vars: Vec<Var> = tensors
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(&format!("x{i}"), t))
        .collect();
    let out = f(&tape, &vars);
    let n_out = out.value().len();
    let w = uniform(&mut rng(seed), n_out);
    let loss = out.mul(tape.input(out.shape(), w.clone()).unwrap()).unwrap().sum();
    let grads = tape.backward(loss).unwrap();

    let w64 = to64(&w);
    let objective = |xs: &[Vec<f64>]| g(xs).iter().zip(&w64).map(|(a, b)| a * b).sum::<f64>();
    let mut xs: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| to64(d)).collect();
    let mut worst = 0.0f64;
    for i in 0..xs.len() {
        let analytic = grads.get(&format!("x{i}")).map(<[f32]>::to_vec);
        for j in 0..xs[i].len() {
            let orig = xs[i][j];
            xs[i][j] = orig + STEP;
            let up = objective(&xs);
            xs[i][j] = orig - STEP;
            let down = objective(&xs);
            xs[i][j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.as_ref().map_or(0.0, |g| f64::from(g[j]));
            worst = worst.max(rel_err(a, numeric, ABS_FLOOR));
        }
    }
    worst
}

fn rand_input(r: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f32>) {
    (shape.to_vec(), uniform(r, shape.iter().product()))
}

/// `(op name, max relative error)` for every differentiable op.
pub fn op_checks() -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let mut out = Vec::new();

    let ab = [rand_input(&mut r, &[4, 4]), rand_input(&mut r, &[4, 4])];
    out.push((
        "matmul",
        check_op(&ab, &|_, v| v[0].matmul(v[1]).unwrap(), &|x| matmul(&x[0], 4, 4, &x[1], 4), 1),
    ));
    let ab = [rand_input(&mut r, &[3, 5]), rand_input(&mut r, &[4, 5])];
    out.push((
        "matmul_nt",
        check_op(
            &ab,
            &|_, v| v[0].matmul_nt(v[1]).unwrap(),
            &|x| matmul(&x[0], 3, 5, &transpose(&x[1], 4, 5), 4),
            2,
        ),
    ));
    let same = [rand_input(&mut r, &[3, 4]), rand_input(&mut r, &[3, 4])];
    out.push((
        "add",
        check_op(&same, &|_, v| v[0].add(v[1]).unwrap(), &|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(), 3),
    ));
    out.push((
        "mul",
        check_op(&same, &|_, v| v[0].mul(v[1]).unwrap(), &|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(), 4),
    ));
    let row = [rand_input(&mut r, &[3, 4]), rand_input(&mut r, &[4])];
    out.push((
        "add_row_broadcast",
        check_op(
            &row,
            &|_, v| v[0].add(v[1]).unwrap(),
            &|x| x[0].iter().enumerate().map(|(i, a)| a + x[1][i % 4]).collect(),
            5,
        ),
    ));
    out.push((
        "mul_row_broadcast",
        check_op(
            &row,
            &|_, v| v[0].mul(v[1]).unwrap(),
            &|x| x[0].iter().enumerate().map(|(i, a)| a * x[1][i % 4]).collect(),
            6,
        ),
    ));
    let sc = [rand_input(&mut r, &[2, 3]), rand_input(&mut r, &[1])];
    out.push((
        "mul_scalar_broadcast",
        check_op(&sc, &|_, v| v[0].mul(v[1]).unwrap(), &|x| x[0].iter().map(|a| a * x[1][0]).collect(), 7),
    ));
    let x = [rand_input(&mut r, &[10])];
    out.push(("scale", check_op(&x, &|_, v| v[0].scale(-1.7), &|x| x[0].iter().map(|a| a * -1.7f32 as f64).collect(), 8)));
    out.push(("silu", check_op(&x, &|_, v| v[0].silu(), &|x| x[0].iter().map(|&a| silu(a)).collect(), 9)));
    out.push(("sum", check_op(&x, &|_, v| v[0].sum(), &|x| vec![x[0].iter().sum()], 10)));
    let x8 = [rand_input(&mut r, &[8])];
    out.push(("softmax", check_op(&x8, &|_, v| v[0].softmax(0).unwrap(), &|x| softmax(&x[0], &[8], 0), 11)));
    let x34 = [rand_input(&mut r, &[3, 4])];
    out.push((
        "softmax_axis0",
        check_op(&x34, &|_, v| v[0].softmax(0).unwrap(), &|x| softmax(&x[0], &[3, 4], 0), 12),
    ));
    let norm = [rand_input(&mut r, &[3, 6]), rand_input(&mut r, &[6])];
    out.push((
        "rms_norm",
        check_op(&norm, &|_, v| v[0].rms_norm(v[1], 1e-5).unwrap(), &|x| rms_norm(&x[0], &x[1], 1e-5), 13),
    ));
    let rx = [rand_input(&mut r, &[3, 8])];
    out.push((
        "rope",
        check_op(
            &rx,
            &|_, v| v[0].rope(2, 5, 10000.0).unwrap(),
            &|x| rope(&x[0], 3, 2, 5, 10000.0),
            14,
        ),
    ));
    let logits = [rand_input(&mut r, &[4, 5])];
    let targets = [1u32, 4, 0, 2];
    let mask = [1u8, 0, 1, 1];
    out.push((
        "cross_entropy",
        check_op(
            &logits,
            &move |_, v| v[0].cross_entropy(&targets, &mask).unwrap(),
            &move |x| vec![cross_entropy(&x[0], 5, &targets, &mask)],
            15,
        ),
    ));
    let table = [rand_input(&mut r, &[5, 3])];
    let ids = [4u32, 0, 4, 2];
    out.push((
        "embedding",
        check_op(
            &table,
            &move |t, v| t.embedding(v[0], &ids).unwrap(),
            &move |x| ids.iter().flat_map(|&i| x[0][i as usize * 3..i as usize * 3 + 3].to_vec()).collect(),
            16,
        ),
    ));
    let qkv = [rand_input(&mut r, &[4, 8]), rand_input(&mut r, &[4, 8]), rand_input(&mut r, &[4, 8])];
    out.push((
        "causal_attention",
        check_op(
            &qkv,
            &|_, v| causal_attention(v[0], v[1], v[2], 2, None).unwrap(),
            &|x| attention(&x[0], &x[1], &x[2], 4, 2),
            17,
        ),
    ));
    let wq = Arc::new(
        quant::quantize_nf4(&Tensor::new(vec![6, 4], uniform(&mut r, 24)).unwrap(), 8, false).unwrap(),
    );
    let deq = to64(quant::dequantize(&wq).data());
    let xq = [rand_input(&mut r, &[3, 6])];
    out.push((
        "qmatmul",
        check_op(&xq, &move |_, v| v[0].qmatmul(&wq).unwrap(), &move |x| matmul(&x[0], 3, 6, &deq, 4), 18),
    ));
    out
}

/// Tape gradients of the full model loss versus central differences of the
/// reference model, at `samples` randomly chosen scalars spread over base and
/// adapter tensors. Returns the max relative error.
pub fn model_check(samples: usize, seed: u64) -> f64 {
    let cfg = ModelConfig {
        max_seq_len: 16,
        ..ModelConfig::toy(40)
    };
    let mut w = init_weights(&cfg, seed).unwrap();
    // larger-than-init weights keep gradients well above rounding noise
    for (_, t) in w.iter_mut() {
        if let WeightTensor::Dense(t) = t {
            if t.rank() == 2 {
                t.data_mut().iter_mut().for_each(|v| *v *= 5.0);
            }
        }
    }
    let lcfg = LoraConfig {
        dropout: 0.0,
        ..LoraConfig::default()
    };
    let mut adapter = lora::attach(&mut w, &lcfg, seed).unwrap();
    let mut r = rng(seed);
    for (_, t) in adapter.tensors_mut() {
        let n = t.numel();
        let vals: Vec<f32> = uniform(&mut r, n).iter().map(|v| v * 0.3).collect();
        t.data_mut().copy_from_slice(&vals);
    }
    w.set_trainable(true);

    let tokens: Vec<u32> = (0..9).map(|_| r.random_range(0..40)).collect();
    let (inputs, targets) = (&tokens[..8], &tokens[1..]);
    let mask = [0u8, 1, 1, 1, 0, 1, 1, 1];
    let tape = Tape::new();
    let model = ModelRef::new(&cfg, &w).with_adapter(Some(&adapter));
    let loss = forward_traced(&tape, model, inputs, None, &mut Mode::Eval)
        .unwrap()
        .cross_entropy(targets, &mask)
        .unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut names: Vec<(String, usize)> = w.iter().map(|(n, t)| (n.to_string(), t.numel())).collect();
    names.extend(adapter.tensors().map(|(n, t)| (n, t.numel())));
    let mut reference = RefModel::new(&cfg, &w, Some(&adapter));
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (name, numel) = names[r.random_range(0..names.len())].clone();
        let i = r.random_range(0..numel);
        let analytic = grads.get(&name).map_or(0.0, |g| f64::from(g[i]));
        let orig = *reference.param_mut(&name, i);
        let at = |v: f64, m: &mut RefModel| {
            *m.param_mut(&name, i) = v;
            cross_entropy(&m.forward(inputs), cfg.vocab_size, targets, &mask)
        };
        let up = at(orig + STEP, &mut reference);
        let down = at(orig - STEP, &mut reference);
        *reference.param_mut(&name, i) = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic, numeric, ABS_FLOOR));
    }
    worst
}
