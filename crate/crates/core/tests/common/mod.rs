//! Independent double-precision reference implementations used as test
//! oracles, plus small fixture helpers.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinylora::lora::LoraAdapter;
use tinylora::model::{ModelConfig, ModelWeights, WeightTensor};
use tinylora::quant;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Softmax along `axis` of a row-major tensor with `shape`.
pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|j| (x[idx(j)] - max).exp()).sum();
            for j in 0..n {
                out[idx(j)] = (x[idx(j)] - max).exp() / z;
            }
        }
    }
    out
}

pub fn rms_norm(x: &[f64], w: &[f64], eps: f64) -> Vec<f64> {
    let d = w.len();
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for j in 0..d {
            o[j] = row[j] * inv * w[j];
        }
    }
    out
}

/// Rotates pair `(2j, 2j+1)` of each head by `pos·theta^(-2j/head_dim)`.
pub fn rope(x: &[f64], rows: usize, n_heads: usize, offset: usize, theta: f64) -> Vec<f64> {
    let dim = x.len() / rows;
    let hd = dim / n_heads;
    let mut out = x.to_vec();
    for t in 0..rows {
        let pos = (offset + t) as f64;
        for h in 0..n_heads {
            for j in 0..hd / 2 {
                let ang = pos * theta.powf(-(2.0 * j as f64) / hd as f64);
                let (s, c) = ang.sin_cos();
                let i = t * dim + h * hd + 2 * j;
                let (a, b) = (x[i], x[i + 1]);
                out[i] = a * c - b * s;
                out[i + 1] = a * s + b * c;
            }
        }
    }
    out
}

/// Causal multi-head attention over `[T × dim]` inputs.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], rows: usize, n_heads: usize) -> Vec<f64> {
    let dim = q.len() / rows;
    let hd = dim / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    for h in 0..n_heads {
        for t in 0..rows {
            let qs = &q[t * dim + h * hd..t * dim + (h + 1) * hd];
            let scores: Vec<f64> = (0..=t)
                .map(|s| {
                    let ks = &k[s * dim + h * hd..s * dim + (h + 1) * hd];
                    qs.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale
                })
                .collect();
            let p = softmax(&scores, &[scores.len()], 0);
            for (s, ps) in p.iter().enumerate() {
                for j in 0..hd {
                    out[t * dim + h * hd + j] += ps * v[s * dim + h * hd + j];
                }
            }
        }
    }
    out
}

/// Mean of `-log softmax(logits)[target]` over masked rows.
pub fn cross_entropy(logits: &[f64], vocab: usize, targets: &[u32], mask: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (r, row) in logits.chunks(vocab).enumerate() {
        if mask[r] == 0 {
            continue;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[targets[r] as usize];
        n += 1;
    }
    total / n as f64
}

/// Double-precision copy of a model (quantized tensors dequantized) with an
/// optional adapter.
pub struct RefModel {
    pub cfg: ModelConfig,
    pub w: BTreeMap<String, Vec<f64>>,
    pub lora: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)>,
    pub scale: f64,
}

impl RefModel {
    pub fn new(cfg: &ModelConfig, weights: &ModelWeights, adapter: Option<&LoraAdapter>) -> Self {
        let w = weights
            .iter()
            .map(|(n, t)| {
                let data = match t {
                    WeightTensor::Dense(t) => to64(t.data()),
                    WeightTensor::Quantized(q) => to64(quant::dequantize(q).data()),
                };
                (n.to_string(), data)
            })
            .collect();
        let mut lora = BTreeMap::new();
        let mut scale = 0.0;
        if let Some(a) = adapter {
            scale = f64::from(a.config().alpha) / a.config().r as f64;
            for (m, p) in a.pairs() {
                lora.insert(m.to_string(), (to64(p.a.data()), to64(p.b.data()), a.config().r));
            }
        }
        Self { cfg: cfg.clone(), w, lora, scale }
    }

    fn linear(&self, x: &[f64], rows: usize, name: &str) -> Vec<f64> {
        let w = &self.w[name];
        let d_in = x.len() / rows;
        let d_out = w.len() / d_in;
        let mut y = matmul(x, rows, d_in, w, d_out);
        if let Some((a, b, r)) = self.lora.get(name) {
            let xa = matmul(x, rows, d_in, &transpose(a, *r, d_in), *r);
            let d = matmul(&xa, rows, *r, &transpose(b, d_out, *r), d_out);
            for (yi, di) in y.iter_mut().zip(d) {
                *yi += self.scale * di;
            }
        }
        y
    }

    pub fn forward(&self, tokens: &[u32]) -> Vec<f64> {
        let cfg = &self.cfg;
        let (d, t) = (cfg.dim, tokens.len());
        let eps = f64::from(cfg.rms_eps);
        let theta = f64::from(cfg.rope_theta);
        let emb = &self.w["tok_embed"];
        let mut h: Vec<f64> = tokens
            .iter()
            .flat_map(|&id| emb[id as usize * d..(id as usize + 1) * d].to_vec())
            .collect();
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let x = rms_norm(&h, &self.w[&p("attn_norm")], eps);
            let q = rope(&self.linear(&x, t, &p("attn.q_proj")), t, cfg.n_heads, 0, theta);
            let k = rope(&self.linear(&x, t, &p("attn.k_proj")), t, cfg.n_heads, 0, theta);
            let v = self.linear(&x, t, &p("attn.v_proj"));
            let a = attention(&q, &k, &v, t, cfg.n_heads);
            let o = self.linear(&a, t, &p("attn.o_proj"));
            h.iter_mut().zip(o).for_each(|(a, b)| *a += b);
            let x = rms_norm(&h, &self.w[&p("ffn_norm")], eps);
            let g = self.linear(&x, t, &p("ffn.gate_proj"));
            let u = self.linear(&x, t, &p("ffn.up_proj"));
            let gu: Vec<f64> = g.iter().zip(&u).map(|(a, b)| silu(*a) * b).collect();
            let f = self.linear(&gu, t, &p("ffn.down_proj"));
            h.iter_mut().zip(f).for_each(|(a, b)| *a += b);
        }
        let x = rms_norm(&h, &self.w["final_norm"], eps);
        self.linear(&x, t, "lm_head")
    }

    /// Mutable handle to a named scalar, base or adapter.
    pub fn param_mut(&mut self, name: &str, i: usize) -> &mut f64 {
        if let Some(module) = name.strip_prefix("lora.") {
            if let Some(m) = module.strip_suffix(".A") {
                return &mut self.lora.get_mut(m).unwrap().0[i];
            }
            let m = module.strip_suffix(".B").unwrap();
            return &mut self.lora.get_mut(m).unwrap().1[i];
        }
        &mut self.w.get_mut(name).unwrap()[i]
    }
}

/// Relative error of one entry; differences at or below `abs_floor` count
/// as exact so near-zero gradients are judged absolutely.
pub fn rel_err(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

pub mod gradcheck;
