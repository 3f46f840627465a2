//! Low-rank adapters over frozen projections.
//!
//! For a target projection `W` (`[d_in × d_out]`, applied as `x · W`) the adapter
//! holds `A: [r × d_in]` and `B: [d_out × r]` and computes
//!
//! ```text
//! h = x·W + (alpha / r) · dropout(x) · Aᵀ · Bᵀ
//! ```
//!
//! `B` starts at zero, so a freshly attached adapter leaves the model
//! unchanged. The scaling is applied at forward time and never folded into
//! the stored matrices.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::model::{base_linear, sidecar_path, ModelConfig, ModelWeights, WeightTensor};
use crate::tensor::io::{self, Record};
use crate::tensor::{kernels, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f32,
    pub dropout: f32,
    pub target_modules: BTreeSet<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 8,
            alpha: 16.0,
            dropout: 0.05,
            target_modules: ["q_proj", "v_proj"].into_iter().map(String::from).collect(),
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.target_modules.is_empty() {
            return Err(Error::Config("target_modules is empty".into()));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.r as f32
    }

    fn matches(&self, name: &str) -> bool {
        self.target_modules.iter().any(|t| suffix_matches(name, t))
    }
}

fn suffix_matches(name: &str, target: &str) -> bool {
    name == target
        || name
            .strip_suffix(target)
            .is_some_and(|head| head.ends_with('.'))
}

/// Matrices whose names match `cfg.target_modules`, with their shapes.
fn resolve_targets<'a>(
    shapes: impl Iterator<Item = (&'a str, &'a [usize])> + Clone,
    cfg: &LoraConfig,
) -> Result<Vec<(String, usize, usize)>> {
    cfg.validate()?;
    for target in &cfg.target_modules {
        if !shapes.clone().any(|(n, s)| s.len() == 2 && suffix_matches(n, target)) {
            let available: BTreeSet<&str> = shapes
                .clone()
                .filter(|(_, s)| s.len() == 2)
                .map(|(n, _)| n.rsplit('.').next().unwrap_or(n))
                .collect();
            return Err(Error::Config(format!(
                "target module {target:?} matches no weight; available: {}",
                available.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
    }
    Ok(shapes
        .filter(|(n, s)| s.len() == 2 && cfg.matches(n))
        .map(|(n, s)| (n.to_string(), s[0], s[1]))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `[r × d_in]`
    pub a: Tensor,
    /// `[d_out × r]`
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    config: LoraConfig,
    pairs: BTreeMap<String, LoraPair>,
    base_fingerprint: u64,
}

/// Train mode applies dropout to the adapter-branch input; eval mode never does.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Creates an adapter for every projection named by `cfg.target_modules`:
/// `A ~ Normal(0, 1/r)`, `B = 0`. Matched base tensors are frozen.
pub fn attach(weights: &mut ModelWeights, cfg: &LoraConfig, seed: u64) -> Result<LoraAdapter> {
    let shapes: Vec<(String, Vec<usize>)> = weights
        .iter()
        .map(|(n, w)| (n.to_string(), w.shape().to_vec()))
        .collect();
    let targets = resolve_targets(shapes.iter().map(|(n, s)| (n.as_str(), s.as_slice())), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0 / cfg.r as f32).expect("positive std");
    let mut pairs = BTreeMap::new();
    for (name, d_in, d_out) in targets {
        if let Some(WeightTensor::Dense(t)) = weights.get_mut(&name) {
            t.set_requires_grad(false);
        }
        let a: Vec<f32> = (0..cfg.r * d_in).map(|_| normal.sample(&mut rng)).collect();
        let pair = LoraPair {
            a: Tensor::new(vec![cfg.r, d_in], a)?.with_requires_grad(true),
            b: Tensor::zeros(vec![d_out, cfg.r]).with_requires_grad(true),
        };
        pairs.insert(name, pair);
    }
    Ok(LoraAdapter {
        config: cfg.clone(),
        pairs,
        base_fingerprint: weights.origin_fingerprint(),
    })
}

/// Trainable adapter parameters for `cfg` on a model shaped like `model`,
/// computed from shapes alone.
pub fn trainable_params_for(model: &ModelConfig, cfg: &LoraConfig) -> Result<usize> {
    let shapes = model.parameter_shapes();
    let targets = resolve_targets(shapes.iter().map(|(n, s)| (n.as_str(), s.as_slice())), cfg)?;
    Ok(targets
        .iter()
        .map(|(_, d_in, d_out)| cfg.r * d_in + d_out * cfg.r)
        .sum())
}

impl LoraAdapter {
    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn base_fingerprint(&self) -> u64 {
        self.base_fingerprint
    }

    pub fn pair(&self, module: &str) -> Option<&LoraPair> {
        self.pairs.get(module)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &LoraPair)> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn modules(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.pairs.values().map(|p| p.a.numel() + p.b.numel()).sum()
    }

    /// `(tensor name, tensor)` for every adapter matrix, in name order.
    pub fn tensors(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.pairs.iter().flat_map(|(m, p)| {
            [(a_name(m), &p.a), (b_name(m), &p.b)].into_iter()
        })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor)> {
        self.pairs.iter_mut().flat_map(|(m, p)| {
            [(a_name(m), &mut p.a), (b_name(m), &mut p.b)].into_iter()
        })
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Fingerprint of the adapter matrices themselves.
    pub fn content_hash(&self) -> u64 {
        fnv1a(&io::encode(&self.records()))
    }

    fn records(&self) -> Vec<Record> {
        self.tensors().map(|(n, t)| Record::from_tensor(n, t)).collect()
    }

    pub fn check_base(&self, weights: &ModelWeights) -> Result<()> {
        let found = weights.origin_fingerprint();
        if found != self.base_fingerprint {
            return Err(Error::Provenance {
                expected: self.base_fingerprint,
                found,
            });
        }
        Ok(())
    }

    /// Replaces the recorded base fingerprint.
    pub fn rebind(&mut self, base_fingerprint: u64) {
        self.base_fingerprint = base_fingerprint;
    }
}

pub fn a_name(module: &str) -> String {
    format!("lora.{module}.A")
}

pub fn b_name(module: &str) -> String {
    format!("lora.{module}.B")
}

fn dropout<'t>(tape: &'t Tape, x: Var<'t>, p: f32, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..x.value().len())
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
        .collect();
    x.mul(tape.input(x.shape(), mask)?)
}

/// Base projection plus the scaled low-rank branch. Dropout (train mode only)
/// touches the branch input; the base path is never dropped.
pub fn adapted_forward<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    name: &str,
    base: &WeightTensor,
    pair: &LoraPair,
    cfg: &LoraConfig,
    mode: &mut Mode<'_>,
) -> Result<Var<'t>> {
    let base_out = base_linear(tape, x, name, base)?;
    let branch_in = match mode {
        Mode::Train(rng) if cfg.dropout > 0.0 => dropout(tape, x, cfg.dropout, rng)?,
        _ => x,
    };
    let a = tape.leaf(&a_name(name), &pair.a);
    let b = tape.leaf(&b_name(name), &pair.b);
    let delta = branch_in.matmul_nt(a)?.matmul_nt(b)?.scale(cfg.scaling());
    base_out.add(delta)
}

/// Folds `(alpha/r)·(B·A)ᵀ` into each target weight. The adapter must have been
/// trained against `weights` unless `force` is set.
pub fn merge(weights: &ModelWeights, adapter: &LoraAdapter, force: bool) -> Result<ModelWeights> {
    if !force {
        adapter.check_base(weights)?;
    }
    let mut out = weights.clone();
    let scale = adapter.config.scaling();
    for (module, pair) in &adapter.pairs {
        let base = weights.dense(module)?;
        let (d_in, d_out) = (base.shape()[0], base.shape()[1]);
        let r = pair.a.shape()[0];
        // (B·A) is [d_out × d_in]; W is stored [d_in × d_out]
        let ba = kernels::matmul(pair.b.data(), d_out, r, pair.a.data(), d_in);
        let delta = kernels::transpose(&ba, d_out, d_in);
        let mut merged = base.clone();
        for (w, d) in merged.data_mut().iter_mut().zip(&delta) {
            *w += scale * d;
        }
        out.insert(module.clone(), WeightTensor::Dense(merged));
    }
    Ok(out)
}

const ADAPTER_FORMAT: &str = "lora-adapter";
const ADAPTER_VERSION: u32 = 1;

/// Writes the adapter container to `path` and its sidecar to `path.cfg`.
pub fn save_adapter(adapter: &LoraAdapter, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = io::encode(&adapter.records());
    let cfg = &adapter.config;
    let sidecar = format!(
        "format={ADAPTER_FORMAT}\nversion={ADAPTER_VERSION}\nr={}\nalpha={}\ndropout={}\ntarget_modules={}\nbase_fingerprint={:016x}\nchecksum={:016x}\n",
        cfg.r,
        cfg.alpha,
        cfg.dropout,
        cfg.target_modules.iter().cloned().collect::<Vec<_>>().join(","),
        adapter.base_fingerprint,
        fnv1a(&bytes),
    );
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, sidecar).map_err(|e| Error::io(side, e))
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<LoraAdapter> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let kv: BTreeMap<String, String> = io::parse_sidecar(&text)?.into_iter().collect();
    let get = |k: &str| {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("adapter sidecar missing {k}")))
    };
    if get("format")? != ADAPTER_FORMAT {
        return Err(Error::Format("not a LoRA adapter sidecar".into()));
    }
    if get("version")? != ADAPTER_VERSION.to_string() {
        return Err(Error::Format(format!(
            "unsupported adapter version {}",
            get("version")?
        )));
    }
    let num = |k: &str| -> Result<f32> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("adapter sidecar: bad {k}")))
    };
    let hex = |k: &str| -> Result<u64> {
        u64::from_str_radix(get(k)?, 16).map_err(|_| Error::Format(format!("adapter sidecar: bad {k}")))
    };
    let config = LoraConfig {
        r: get("r")?
            .parse()
            .map_err(|_| Error::Format("adapter sidecar: bad r".into()))?,
        alpha: num("alpha")?,
        dropout: num("dropout")?,
        target_modules: get("target_modules")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect(),
    };
    config.validate()?;

    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if fnv1a(&bytes) != hex("checksum")? {
        return Err(Error::Format(format!(
            "{}: adapter checksum mismatch",
            path.display()
        )));
    }
    let mut a_mats = BTreeMap::new();
    let mut b_mats = BTreeMap::new();
    for rec in io::decode(&bytes)? {
        let t = rec.to_tensor()?.with_requires_grad(true);
        let body = rec
            .name
            .strip_prefix("lora.")
            .ok_or_else(|| Error::Format(format!("unexpected tensor {}", rec.name)))?;
        if let Some(module) = body.strip_suffix(".A") {
            a_mats.insert(module.to_string(), t);
        } else if let Some(module) = body.strip_suffix(".B") {
            b_mats.insert(module.to_string(), t);
        } else {
            return Err(Error::Format(format!("unexpected tensor {}", rec.name)));
        }
    }
    let mut pairs = BTreeMap::new();
    for (module, a) in a_mats {
        let b = b_mats
            .remove(&module)
            .ok_or_else(|| Error::Format(format!("{module}: B matrix missing")))?;
        if a.shape()[0] != config.r || b.shape()[1] != config.r {
            return Err(Error::Format(format!("{module}: rank does not match r={}", config.r)));
        }
        pairs.insert(module, LoraPair { a, b });
    }
    if let Some(module) = b_mats.keys().next() {
        return Err(Error::Format(format!("{module}: A matrix missing")));
    }
    Ok(LoraAdapter {
        config,
        pairs,
        base_fingerprint: hex("base_fingerprint")?,
    })
}
