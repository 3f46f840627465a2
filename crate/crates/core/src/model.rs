//! LLaMA-style decoder: pre-norm blocks with RMSNorm, rotary causal attention
//! and a SwiGLU feed-forward, no biases, untied output head.
//!
//! Every projection matrix is stored `[d_in × d_out]` and applied as `x · W`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::lora::{self, LoraAdapter, Mode};
use crate::quant::{self, QuantizedTensor};
use crate::tensor::io::{self, Payload, Record};
use crate::tensor::{causal_attention, AttnPast, Tape, Tensor, Var};

pub const ATTN_PROJ: [&str; 4] = ["q_proj", "k_proj", "v_proj", "o_proj"];
pub const FFN_PROJ: [&str; 3] = ["gate_proj", "up_proj", "down_proj"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: f64,
    pub max_seq_len: usize,
    pub rope_theta: f32,
    pub rms_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(256)
    }
}

impl ModelConfig {
    /// dim 64, 2 layers, 4 heads, SwiGLU multiplier 8/3, context 256.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 8.0 / 3.0,
            max_seq_len: 256,
            rope_theta: 10_000.0,
            rms_eps: 1e-5,
        }
    }

    /// LLaMA-7B shapes (32k vocabulary, dim 4096, 32 layers, 32 heads).
    pub fn llama_7b() -> Self {
        Self {
            vocab_size: 32_000,
            dim: 4096,
            n_layers: 32,
            n_heads: 32,
            ffn_mult: 8.0 / 3.0,
            max_seq_len: 2048,
            rope_theta: 10_000.0,
            rms_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.dim == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return bad("vocab_size, dim, n_layers and max_seq_len must be positive".into());
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return bad(format!("dim {} not divisible by n_heads {}", self.dim, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head_dim {} must be even for rotary pairs", self.head_dim()));
        }
        if !(self.ffn_mult > 0.0) || !(self.rope_theta > 0.0) || !(self.rms_eps > 0.0) {
            return bad("ffn_mult, rope_theta and rms_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// SwiGLU hidden width: `ffn_mult · dim` rounded up to a multiple of 8.
    pub fn ffn_hidden(&self) -> usize {
        let raw = self.ffn_mult * self.dim as f64;
        ((raw - 1e-9) / 8.0).ceil() as usize * 8
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, h) = (self.vocab_size, self.dim, self.ffn_hidden());
        2 * v * d + self.n_layers * (4 * d * d + 3 * d * h + 2 * d) + d
    }

    /// Canonical parameter names and shapes in name order.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (v, d, h) = (self.vocab_size, self.dim, self.ffn_hidden());
        let mut out = BTreeMap::new();
        out.insert("tok_embed".to_string(), vec![v, d]);
        out.insert("final_norm".to_string(), vec![d]);
        out.insert("lm_head".to_string(), vec![d, v]);
        for i in 0..self.n_layers {
            for p in ATTN_PROJ {
                out.insert(format!("layers.{i}.attn.{p}"), vec![d, d]);
            }
            out.insert(format!("layers.{i}.ffn.gate_proj"), vec![d, h]);
            out.insert(format!("layers.{i}.ffn.up_proj"), vec![d, h]);
            out.insert(format!("layers.{i}.ffn.down_proj"), vec![h, d]);
            out.insert(format!("layers.{i}.attn_norm"), vec![d]);
            out.insert(format!("layers.{i}.ffn_norm"), vec![d]);
        }
        out
    }

    pub fn to_sidecar(&self) -> String {
        format!(
            "vocab_size={}\ndim={}\nn_layers={}\nn_heads={}\nffn_mult={}\nmax_seq_len={}\nrope_theta={}\nrms_eps={}\n",
            self.vocab_size,
            self.dim,
            self.n_layers,
            self.n_heads,
            self.ffn_mult,
            self.max_seq_len,
            self.rope_theta,
            self.rms_eps
        )
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let kv: BTreeMap<String, String> = io::parse_sidecar(text)?.into_iter().collect();
        fn field<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            kv.get(key)
                .ok_or_else(|| Error::Format(format!("config sidecar missing {key}")))?
                .parse()
                .map_err(|_| Error::Format(format!("config sidecar: bad value for {key}")))
        }
        let cfg = Self {
            vocab_size: field(&kv, "vocab_size")?,
            dim: field(&kv, "dim")?,
            n_layers: field(&kv, "n_layers")?,
            n_heads: field(&kv, "n_heads")?,
            ffn_mult: field(&kv, "ffn_mult")?,
            max_seq_len: field(&kv, "max_seq_len")?,
            rope_theta: field(&kv, "rope_theta")?,
            rms_eps: field(&kv, "rms_eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A base parameter, either dense or stored quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightTensor {
    Dense(Tensor),
    Quantized(Arc<QuantizedTensor>),
}

impl WeightTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            WeightTensor::Dense(t) => t.shape(),
            WeightTensor::Quantized(q) => q.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn as_dense(&self) -> Option<&Tensor> {
        match self {
            WeightTensor::Dense(t) => Some(t),
            WeightTensor::Quantized(_) => None,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, WeightTensor::Dense(t) if t.requires_grad())
    }

    fn hash_into(&self, h: &mut Fnv1a) {
        match self {
            WeightTensor::Dense(t) => h.write_f32s(t.data()),
            WeightTensor::Quantized(q) => {
                match q.codes() {
                    quant::Codes::Int8(c) => c.iter().for_each(|&b| h.write(&[b as u8])),
                    quant::Codes::Packed4(c) => h.write(c),
                }
                match q.scales() {
                    quant::Scales::Plain(s) => h.write_f32s(s),
                    quant::Scales::Double(dq) => {
                        dq.scale_codes.iter().for_each(|&b| h.write(&[b as u8]));
                        h.write_f32s(&dq.meta_scales);
                    }
                }
            }
        }
    }
}

/// Named base parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelWeights {
    tensors: BTreeMap<String, WeightTensor>,
    origin: Option<u64>,
}

impl ModelWeights {
    pub fn insert(&mut self, name: impl Into<String>, tensor: WeightTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut WeightTensor> {
        self.tensors.get_mut(name)
    }

    pub fn dense(&self, name: &str) -> Result<&Tensor> {
        match self.tensors.get(name) {
            Some(WeightTensor::Dense(t)) => Ok(t),
            Some(WeightTensor::Quantized(_)) => {
                Err(Error::Config(format!("{name} is quantized; a dense tensor is required")))
            }
            None => Err(Error::Config(format!("missing weight {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut WeightTensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.values().map(WeightTensor::numel).sum()
    }

    pub fn is_quantized(&self) -> bool {
        self.tensors
            .values()
            .any(|w| matches!(w, WeightTensor::Quantized(_)))
    }

    /// Marks every dense tensor trainable (full-parameter training) or frozen.
    pub fn set_trainable(&mut self, trainable: bool) {
        for w in self.tensors.values_mut() {
            if let WeightTensor::Dense(t) = w {
                t.set_requires_grad(trainable);
            }
        }
    }

    /// FNV-1a over names and stored bytes, in name order.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (name, w) in &self.tensors {
            h.write(name.as_bytes());
            w.hash_into(&mut h);
        }
        h.finish()
    }

    /// Fingerprint of the dense weights this model was derived from; equal to
    /// [`fingerprint`](Self::fingerprint) unless the weights were quantized.
    pub fn origin_fingerprint(&self) -> u64 {
        self.origin.unwrap_or_else(|| self.fingerprint())
    }

    pub(crate) fn set_origin_fingerprint(&mut self, fp: u64) {
        self.origin = Some(fp);
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = cfg.parameter_shapes();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Config(format!("missing weight {name}"))),
                Some(w) if w.shape() != shape.as_slice() => {
                    return Err(Error::shape("weights", w.shape(), shape));
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected weight {extra}")));
        }
        Ok(())
    }
}

/// Deterministic initialization: matrices ~ Normal(0, 0.02), norm gains 1.
/// All tensors start frozen.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.02).expect("valid std");
    let mut weights = ModelWeights::default();
    for (name, shape) in cfg.parameter_shapes() {
        let numel = shape.iter().product();
        let data = if shape.len() == 1 {
            vec![1.0; numel]
        } else {
            (0..numel).map(|_| normal.sample(&mut rng)).collect()
        };
        weights.insert(name, WeightTensor::Dense(Tensor::new(shape, data)?));
    }
    Ok(weights)
}

#[derive(Debug, Clone)]
struct LayerCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

/// Per-layer rotated keys and values of every position seen so far,
/// logically `[n_heads × seen_len × head_dim]`.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    seen_len: usize,
    max_seq_len: usize,
    n_heads: usize,
    head_dim: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        let layer = LayerCache {
            keys: vec![Vec::new(); cfg.n_heads],
            values: vec![Vec::new(); cfg.n_heads],
        };
        Self {
            layers: vec![layer; cfg.n_layers],
            seen_len: 0,
            max_seq_len: cfg.max_seq_len,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
        }
    }

    pub fn seen_len(&self) -> usize {
        self.seen_len
    }

    pub fn is_empty(&self) -> bool {
        self.seen_len == 0
    }

    /// Positions still available before the context is full.
    pub fn remaining(&self) -> usize {
        self.max_seq_len - self.seen_len
    }

    /// Keys of `layer`/`head` as `[seen_len × head_dim]`.
    pub fn keys(&self, layer: usize, head: usize) -> &[f32] {
        &self.layers[layer].keys[head]
    }

    pub fn values(&self, layer: usize, head: usize) -> &[f32] {
        &self.layers[layer].values[head]
    }

    fn past(&self, layer: usize) -> Option<AttnPast<'_>> {
        (self.seen_len > 0).then(|| AttnPast {
            keys: &self.layers[layer].keys,
            values: &self.layers[layer].values,
            len: self.seen_len,
        })
    }

    fn append_layer(&mut self, layer: usize, k: &[f32], v: &[f32]) {
        let dim = self.n_heads * self.head_dim;
        let hd = self.head_dim;
        let lc = &mut self.layers[layer];
        for row in 0..k.len() / dim {
            for h in 0..self.n_heads {
                let r = row * dim + h * hd..row * dim + (h + 1) * hd;
                lc.keys[h].extend_from_slice(&k[r.clone()]);
                lc.values[h].extend_from_slice(&v[r]);
            }
        }
    }
}

/// Everything a forward pass reads: base weights, config and an optional adapter.
#[derive(Clone, Copy)]
pub struct ModelRef<'a> {
    pub cfg: &'a ModelConfig,
    pub weights: &'a ModelWeights,
    pub adapter: Option<&'a LoraAdapter>,
}

impl<'a> ModelRef<'a> {
    pub fn new(cfg: &'a ModelConfig, weights: &'a ModelWeights) -> Self {
        Self {
            cfg,
            weights,
            adapter: None,
        }
    }

    pub fn with_adapter(mut self, adapter: Option<&'a LoraAdapter>) -> Self {
        self.adapter = adapter;
        self
    }
}

fn weight<'w>(weights: &'w ModelWeights, name: &str) -> Result<&'w WeightTensor> {
    weights
        .get(name)
        .ok_or_else(|| Error::Config(format!("missing weight {name}")))
}

fn dense_leaf<'t>(tape: &'t Tape, weights: &ModelWeights, name: &str) -> Result<Var<'t>> {
    match weight(weights, name)? {
        WeightTensor::Dense(t) => Ok(tape.leaf(name, t)),
        WeightTensor::Quantized(q) => Ok(tape.constant(&quant::dequantize(q))),
    }
}

/// `x · W` for a base weight, dense or quantized.
pub(crate) fn base_linear<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    name: &str,
    w: &WeightTensor,
) -> Result<Var<'t>> {
    match w {
        WeightTensor::Dense(t) => x.matmul(tape.leaf(name, t)),
        WeightTensor::Quantized(q) => x.qmatmul(q),
    }
}

fn linear<'t>(
    tape: &'t Tape,
    model: ModelRef<'_>,
    x: Var<'t>,
    name: &str,
    mode: &mut Mode<'_>,
) -> Result<Var<'t>> {
    let w = weight(model.weights, name)?;
    match model.adapter.and_then(|a| a.pair(name).map(|p| (a, p))) {
        Some((adapter, pair)) => lora::adapted_forward(tape, x, name, w, pair, adapter.config(), mode),
        None => base_linear(tape, x, name, w),
    }
}

/// Records a forward pass of `tokens` on `tape` and returns logits
/// `[len(tokens) × vocab_size]`. With a cache, `tokens` continue the cached
/// sequence and their keys/values are appended.
pub fn forward_traced<'t>(
    tape: &'t Tape,
    model: ModelRef<'_>,
    tokens: &[u32],
    mut cache: Option<&mut KvCache>,
    mode: &mut Mode<'_>,
) -> Result<Var<'t>> {
    let cfg = model.cfg;
    let offset = cache.as_ref().map_or(0, |c| c.seen_len);
    if tokens.is_empty() {
        return Err(Error::Data("forward needs at least one token".into()));
    }
    if offset + tokens.len() > cfg.max_seq_len {
        return Err(Error::ContextLength {
            needed: offset + tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    let w = model.weights;
    let mut h = tape.embedding(dense_leaf(tape, w, "tok_embed")?, tokens)?;
    for layer in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{layer}.{s}");
        let normed = h.rms_norm(dense_leaf(tape, w, &p("attn_norm"))?, cfg.rms_eps)?;
        let q = linear(tape, model, normed, &p("attn.q_proj"), mode)?;
        let k = linear(tape, model, normed, &p("attn.k_proj"), mode)?;
        let v = linear(tape, model, normed, &p("attn.v_proj"), mode)?;
        let q = q.rope(cfg.n_heads, offset, cfg.rope_theta)?;
        let k = k.rope(cfg.n_heads, offset, cfg.rope_theta)?;
        let attn = causal_attention(q, k, v, cfg.n_heads, cache.as_ref().and_then(|c| c.past(layer)))?;
        if let Some(c) = cache.as_mut() {
            c.append_layer(layer, &k.value(), &v.value());
        }
        h = h.add(linear(tape, model, attn, &p("attn.o_proj"), mode)?)?;

        let normed = h.rms_norm(dense_leaf(tape, w, &p("ffn_norm"))?, cfg.rms_eps)?;
        let gate = linear(tape, model, normed, &p("ffn.gate_proj"), mode)?.silu();
        let up = linear(tape, model, normed, &p("ffn.up_proj"), mode)?;
        let ffn = linear(tape, model, gate.mul(up)?, &p("ffn.down_proj"), mode)?;
        h = h.add(ffn)?;
    }
    if let Some(c) = cache {
        c.seen_len += tokens.len();
    }
    let h = h.rms_norm(dense_leaf(tape, w, "final_norm")?, cfg.rms_eps)?;
    linear(tape, model, h, "lm_head", mode)
}

/// Eval-mode logits, no gradients.
pub fn forward(model: ModelRef<'_>, tokens: &[u32], cache: Option<&mut KvCache>) -> Result<Tensor> {
    let tape = Tape::new();
    let logits = forward_traced(&tape, model, tokens, cache, &mut Mode::Eval)?;
    Ok(logits.to_tensor())
}

/// Rotates consecutive pairs of each head of `x[T × n_heads·head_dim]`; row `t`
/// is at position `offset + t`.
pub fn apply_rope(x: &Tensor, n_heads: usize, offset: usize, theta: f32) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(tape.constant(x).rope(n_heads, offset, theta)?.to_tensor())
}

/// Sidecar path for a container path: `model.bin` → `model.cfg`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("cfg")
}

pub fn save_model(path: impl AsRef<Path>, cfg: &ModelConfig, weights: &ModelWeights) -> Result<()> {
    let path = path.as_ref();
    let mut records = Vec::new();
    let mut sidecar = cfg.to_sidecar();
    for (name, w) in weights.iter() {
        match w {
            WeightTensor::Dense(t) => records.push(Record::from_tensor(name, t)),
            WeightTensor::Quantized(q) => {
                records.extend(q.to_records());
                sidecar.push_str(&format!("quant.{name}={}\n", q.meta_string()));
            }
        }
    }
    if let Some(origin) = weights.origin {
        sidecar.push_str(&format!("origin_fingerprint={origin:016x}\n"));
    }
    io::write(path, &records)?;
    let side = sidecar_path(path);
    fs::write(&side, sidecar).map_err(|e| Error::io(side, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelWeights)> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let cfg = ModelConfig::from_sidecar(&text)?;
    let kv = io::parse_sidecar(&text)?;
    let mut quant_meta = BTreeMap::new();
    let mut origin = None;
    for (k, v) in &kv {
        if let Some(name) = k.strip_prefix("quant.") {
            quant_meta.insert(name.to_string(), quant::parse_meta(v)?);
        } else if k == "origin_fingerprint" {
            origin = Some(
                u64::from_str_radix(v, 16)
                    .map_err(|_| Error::Format("bad origin_fingerprint".into()))?,
            );
        }
    }
    let records: BTreeMap<String, Record> = io::read(path)?
        .into_iter()
        .map(|r| (r.name.clone(), r))
        .collect();
    let mut weights = ModelWeights::default();
    for name in cfg.parameter_shapes().keys() {
        let rec = records
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing {name}")))?;
        let w = match quant_meta.get(name) {
            Some(meta) => WeightTensor::Quantized(Arc::new(QuantizedTensor::from_records(
                rec,
                |n| records.get(n).cloned(),
                meta,
            )?)),
            None => match &rec.payload {
                Payload::F32(_) => WeightTensor::Dense(rec.to_tensor()?),
                _ => {
                    return Err(Error::Format(format!(
                        "{name} holds quantized codes but has no metadata"
                    )))
                }
            },
        };
        weights.insert(name.clone(), w);
    }
    weights.origin = origin;
    weights.validate(&cfg)?;
    Ok((cfg, weights))
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "vocab {} dim {} layers {} heads {} ffn {} ctx {}",
            self.vocab_size,
            self.dim,
            self.n_layers,
            self.n_heads,
            self.ffn_hidden(),
            self.max_seq_len
        )
    }
}
