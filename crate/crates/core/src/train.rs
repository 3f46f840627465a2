//! Adapter training: AdamW over the LoRA matrices of a frozen (optionally
//! quantized) base, gradient accumulation, deterministic data order,
//! checkpoint directories and continued fine-tuning.
//!
//! The sample stream is the concatenation of one seeded permutation per
//! epoch; optimizer step `s` consumes stream positions
//! `[s·effective_batch, (s+1)·effective_batch)`. Dropout noise for step `s`
//! comes from a generator keyed by `(seed, s)`. Both depend only on the step
//! number, which is what lets a resumed run continue bit-for-bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::EncodedSample;
use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::lora::{self, LoraAdapter, LoraConfig, Mode};
use crate::model::{forward_traced, ModelConfig, ModelRef, ModelWeights};
use crate::quant::{self, BaseQuant, DEFAULT_BLOCK_SIZE};
use crate::tensor::io::{self, Record};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub epochs: usize,
    pub lr: f32,
    pub cutoff_len: usize,
    pub warmup_steps: usize,
    pub seed: u64,
    pub quant_scheme: BaseQuant,
    pub quant_block_size: usize,
    /// 0 disables periodic checkpoints.
    pub save_every_steps: usize,
    /// Overrides the epoch-derived step count when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            effective_batch: 128,
            micro_batch: 4,
            epochs: 3,
            lr: 3e-4,
            cutoff_len: 256,
            warmup_steps: 100,
            seed: 42,
            quant_scheme: BaseQuant::Int8,
            quant_block_size: DEFAULT_BLOCK_SIZE,
            save_every_steps: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.effective_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.effective_batch % self.micro_batch != 0 {
            return Err(Error::Config(format!(
                "effective_batch {} is not divisible by micro_batch {}",
                self.effective_batch, self.micro_batch
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.cutoff_len == 0 {
            return Err(Error::Config("cutoff_len must be positive".into()));
        }
        if self.quant_block_size == 0 {
            return Err(Error::Config("quant_block_size must be positive".into()));
        }
        Ok(())
    }

    pub fn accumulation_steps(&self) -> usize {
        self.effective_batch / self.micro_batch
    }

    /// Total optimizer steps for `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * n.div_ceil(self.effective_batch))
    }

    /// Linear warmup over `warmup_steps`, then constant.
    pub fn lr_at(&self, step: usize) -> f32 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f32 / self.warmup_steps as f32
        } else {
            self.lr
        }
    }
}

/// AdamW with per-parameter moments keyed by tensor name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamW {
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter that carries a gradient.
    pub fn step<'p>(&mut self, lr: f32, params: impl IntoIterator<Item = (String, &'p mut Tensor)>) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let Some(g) = p.grad().map(<[f32]>::to_vec) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }

    fn to_records(&self) -> Vec<Record> {
        let rec = |prefix: &str, name: &str, data: &[f32]| Record {
            name: format!("{prefix}.{name}"),
            dims: vec![data.len()],
            payload: io::Payload::F32(data.to_vec()),
        };
        self.m
            .iter()
            .map(|(n, d)| rec("m", n, d))
            .chain(self.v.iter().map(|(n, d)| rec("v", n, d)))
            .collect()
    }

    fn from_records(records: Vec<Record>, t: u64) -> Result<Self> {
        let mut opt = AdamW {
            t,
            ..AdamW::default()
        };
        for rec in records {
            let io::Payload::F32(data) = rec.payload else {
                return Err(Error::Format(format!("optimizer tensor {} is not f32", rec.name)));
            };
            if let Some(n) = rec.name.strip_prefix("m.") {
                opt.m.insert(n.to_string(), data);
            } else if let Some(n) = rec.name.strip_prefix("v.") {
                opt.v.insert(n.to_string(), data);
            } else {
                return Err(Error::Format(format!("unexpected optimizer tensor {}", rec.name)));
            }
        }
        Ok(opt)
    }
}

/// Everything needed to resume or continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub adapter: LoraAdapter,
    pub optimizer: AdamW,
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub run_id: String,
    /// Runs this adapter was continued from, oldest first.
    pub provenance: Vec<String>,
    pub loss_history: Vec<(usize, f32)>,
}

impl Checkpoint {
    pub fn final_loss(&self) -> Option<f32> {
        self.loss_history.last().map(|&(_, l)| l)
    }
}

const STATE_FORMAT: &str = "trainer-state";
const STATE_VERSION: u32 = 1;

pub fn save_checkpoint(dir: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    lora::save_adapter(&ckpt.adapter, dir.join("adapter.bin"))?;
    io::write(dir.join("optimizer.bin"), &ckpt.optimizer.to_records())?;
    let mut state = format!(
        "format={STATE_FORMAT}\nversion={STATE_VERSION}\nrun_id={}\nstep={}\nepoch={}\nseed={}\noptimizer_step={}\nprovenance={}\n",
        ckpt.run_id,
        ckpt.step,
        ckpt.epoch,
        ckpt.seed,
        ckpt.optimizer.t,
        ckpt.provenance.join(","),
    );
    state.push_str("loss_history\n");
    for (s, l) in &ckpt.loss_history {
        let _ = writeln!(state, "{s},{l}");
    }
    let path = dir.join("trainer_state");
    fs::write(&path, state).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join("trainer_state");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (head, history) = text
        .split_once("loss_history\n")
        .ok_or_else(|| Error::Format("trainer_state: missing loss_history section".into()))?;
    let kv: BTreeMap<String, String> = io::parse_sidecar(head)?.into_iter().collect();
    let get = |k: &str| {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("trainer_state: missing {k}")))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("trainer_state: bad {k}")))
    };
    if get("format")? != STATE_FORMAT || num("version")? != u64::from(STATE_VERSION) {
        return Err(Error::Format("trainer_state: unsupported format or version".into()));
    }
    let loss_history = history
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || Error::Format(format!("trainer_state: bad loss line {l:?}"));
            let (s, v) = l.split_once(',').ok_or_else(bad)?;
            Ok((s.parse().map_err(|_| bad())?, v.parse().map_err(|_| bad())?))
        })
        .collect::<Result<Vec<_>>>()?;
    let provenance = get("provenance")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    Ok(Checkpoint {
        adapter: lora::load_adapter(dir.join("adapter.bin"))?,
        optimizer: AdamW::from_records(io::read(dir.join("optimizer.bin"))?, num("optimizer_step")?)?,
        step: num("step")? as usize,
        epoch: num("epoch")? as usize,
        seed: num("seed")?,
        run_id: get("run_id")?.to_string(),
        provenance,
        loss_history,
    })
}

fn permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 40 | epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn dropout_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn make_run_id(seed: u64, adapter: &LoraAdapter, samples: &[EncodedSample], parent: Option<&str>) -> String {
    let mut h = Fnv1a::new();
    h.write(&seed.to_le_bytes());
    h.write(&adapter.content_hash().to_le_bytes());
    for s in samples {
        for id in &s.ids {
            h.write(&id.to_le_bytes());
        }
        h.write(&s.loss_mask);
    }
    if let Some(p) = parent {
        h.write(p.as_bytes());
    }
    format!("run-{:016x}", h.finish())
}

/// Frozen base as used for training: quantized per `tcfg`, with every tensor
/// non-trainable.
pub fn prepare_base(weights: &ModelWeights, tcfg: &TrainConfig) -> Result<ModelWeights> {
    let mut base = match tcfg.quant_scheme.scheme() {
        Some(s) => quant::quantize_weights(weights, s, tcfg.quant_block_size)?,
        None => weights.clone(),
    };
    base.set_trainable(false);
    Ok(base)
}

/// Per-step gradients for samples `batch`, weighted so that summing the
/// returned losses over an effective batch yields its token-level mean.
fn micro_step(
    model: ModelRef<'_>,
    samples: &[EncodedSample],
    batch: &[usize],
    total_tokens: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f32, crate::tensor::Gradients)> {
    let tape = Tape::new();
    let mut total = None;
    let mut mode = Mode::Train(rng);
    for &i in batch {
        let s = &samples[i];
        let (inputs, targets, mask) = s.shifted();
        let logits = forward_traced(&tape, model, inputs, None, &mut mode)?;
        let n = mask.iter().filter(|&&m| m != 0).count();
        let loss = logits
            .cross_entropy(targets, mask)?
            .scale(n as f32 / total_tokens as f32);
        total = Some(match total {
            None => loss,
            Some(acc) => loss.add(acc)?,
        });
    }
    let total = total.expect("micro-batch is non-empty");
    let value = total.item();
    Ok((value, tape.backward(total)?))
}

/// Stateful LoRA trainer over a fixed frozen base.
pub struct Trainer {
    cfg: ModelConfig,
    base: ModelWeights,
    samples: Vec<EncodedSample>,
    tcfg: TrainConfig,
    ckpt: Checkpoint,
    perm: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    /// Fresh adapter on `weights` (quantized per `tcfg.quant_scheme`).
    pub fn new(
        cfg: &ModelConfig,
        weights: &ModelWeights,
        samples: Vec<EncodedSample>,
        tcfg: &TrainConfig,
        lcfg: &LoraConfig,
    ) -> Result<Self> {
        tcfg.validate()?;
        let mut base = prepare_base(weights, tcfg)?;
        let adapter = lora::attach(&mut base, lcfg, tcfg.seed)?;
        let run_id = make_run_id(tcfg.seed, &adapter, &samples, None);
        Self::with_checkpoint(
            cfg,
            base,
            samples,
            tcfg,
            Checkpoint {
                adapter,
                optimizer: AdamW::default(),
                step: 0,
                epoch: 0,
                seed: tcfg.seed,
                run_id,
                provenance: Vec::new(),
                loss_history: Vec::new(),
            },
        )
    }

    /// Picks up an interrupted run exactly where `ckpt` left off.
    pub fn resume(
        cfg: &ModelConfig,
        weights: &ModelWeights,
        samples: Vec<EncodedSample>,
        tcfg: &TrainConfig,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        tcfg.validate()?;
        let base = prepare_base(weights, tcfg)?;
        ckpt.adapter.check_base(&base)?;
        let tcfg = TrainConfig {
            seed: ckpt.seed,
            ..tcfg.clone()
        };
        Self::with_checkpoint(cfg, base, samples, &tcfg, ckpt)
    }

    /// Starts a new run on `samples` from the adapter weights of `prior`, with
    /// a fresh optimizer and schedule. The prior run id joins the provenance
    /// chain.
    pub fn continue_from(
        cfg: &ModelConfig,
        weights: &ModelWeights,
        samples: Vec<EncodedSample>,
        tcfg: &TrainConfig,
        prior: &Checkpoint,
    ) -> Result<Self> {
        tcfg.validate()?;
        let base = prepare_base(weights, tcfg)?;
        prior.adapter.check_base(&base)?;
        let mut adapter = prior.adapter.clone();
        adapter.zero_grad();
        let mut provenance = prior.provenance.clone();
        provenance.push(prior.run_id.clone());
        let run_id = make_run_id(tcfg.seed, &adapter, &samples, Some(&prior.run_id));
        Self::with_checkpoint(
            cfg,
            base,
            samples,
            tcfg,
            Checkpoint {
                adapter,
                optimizer: AdamW::default(),
                step: 0,
                epoch: 0,
                seed: tcfg.seed,
                run_id,
                provenance,
                loss_history: Vec::new(),
            },
        )
    }

    fn with_checkpoint(
        cfg: &ModelConfig,
        base: ModelWeights,
        samples: Vec<EncodedSample>,
        tcfg: &TrainConfig,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        cfg.validate()?;
        base.validate(cfg)?;
        if ckpt.adapter.num_params() == 0 {
            return Err(Error::Config("no trainable parameters".into()));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| s.ids.len() < 2 || s.supervised() == 0 || s.ids.len() > cfg.max_seq_len + 1)
        {
            return Err(Error::Data(format!(
                "sample {i} is unusable for training ({} tokens, {} supervised, max_seq_len {})",
                s.ids.len(),
                s.supervised(),
                cfg.max_seq_len
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            base,
            samples,
            tcfg: tcfg.clone(),
            ckpt,
            perm: None,
        })
    }

    pub fn base(&self) -> &ModelWeights {
        &self.base
    }

    pub fn adapter(&self) -> &LoraAdapter {
        &self.ckpt.adapter
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ckpt
    }

    pub fn step_count(&self) -> usize {
        self.ckpt.step
    }

    pub fn total_steps(&self) -> usize {
        self.tcfg.total_steps(self.samples.len())
    }

    pub fn is_done(&self) -> bool {
        self.ckpt.step >= self.total_steps()
    }

    fn stream_index(&mut self, pos: usize) -> usize {
        let n = self.samples.len();
        let epoch = pos / n;
        if self.perm.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.perm = Some((epoch, permutation(self.ckpt.seed, epoch, n)));
        }
        self.perm.as_ref().expect("just filled").1[pos % n]
    }

    /// Sample indices of optimizer step `step`.
    pub fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let eff = self.tcfg.effective_batch;
        (step * eff..(step + 1) * eff).map(|p| self.stream_index(p)).collect()
    }

    /// Runs one optimizer update and returns its mean masked loss.
    pub fn step(&mut self) -> Result<f32> {
        if self.samples.is_empty() {
            return Err(Error::Data("training dataset is empty".into()));
        }
        let step = self.ckpt.step;
        let batch = self.batch_indices(step);
        let total_tokens: usize = batch.iter().map(|&i| self.samples[i].shifted().2.iter().filter(|&&m| m != 0).count()).sum();
        let mut rng = dropout_rng(self.ckpt.seed, step);
        self.ckpt.adapter.zero_grad();
        let mut loss = 0.0f32;
        for micro in batch.chunks(self.tcfg.micro_batch) {
            let model = ModelRef::new(&self.cfg, &self.base).with_adapter(Some(&self.ckpt.adapter));
            let (l, grads) = micro_step(model, &self.samples, micro, total_tokens, &mut rng)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    samples: micro.to_vec(),
                });
            }
            loss += l;
            for (name, t) in self.ckpt.adapter.tensors_mut() {
                grads.accumulate_into(&name, t)?;
            }
        }
        let lr = self.tcfg.lr_at(step);
        self.ckpt.optimizer.step(lr, self.ckpt.adapter.tensors_mut());
        self.ckpt.adapter.zero_grad();
        self.ckpt.step += 1;
        self.ckpt.epoch = self.ckpt.step * self.tcfg.effective_batch / self.samples.len();
        self.ckpt.loss_history.push((step, loss));
        Ok(loss)
    }

    /// Trains to completion. `sink` sees a checkpoint every
    /// `save_every_steps`, at each epoch boundary, and at the end.
    pub fn run(&mut self, mut sink: impl FnMut(&Checkpoint) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let epoch_before = self.ckpt.epoch;
            self.step()?;
            let periodic = self.tcfg.save_every_steps > 0 && self.ckpt.step % self.tcfg.save_every_steps == 0;
            if (periodic || self.ckpt.epoch != epoch_before) && !self.is_done() {
                sink(&self.ckpt)?;
            }
        }
        sink(&self.ckpt)
    }

    /// Trains up to `steps` more updates without emitting checkpoints.
    pub fn run_steps(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            if self.is_done() {
                break;
            }
            self.step()?;
        }
        Ok(())
    }
}

/// Trains a fresh adapter and returns the final checkpoint.
pub fn train(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    samples: Vec<EncodedSample>,
    tcfg: &TrainConfig,
    lcfg: &LoraConfig,
    sink: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg, weights, samples, tcfg, lcfg)?;
    t.run(sink)?;
    Ok(t.into_checkpoint())
}

pub fn continue_finetune(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    prior: &Checkpoint,
    samples: Vec<EncodedSample>,
    tcfg: &TrainConfig,
    sink: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let mut t = Trainer::continue_from(cfg, weights, samples, tcfg, prior)?;
    t.run(sink)?;
    Ok(t.into_checkpoint())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Token-weighted mean over every supervised position.
    pub mean_loss: f32,
    pub per_sample: Vec<f32>,
}

/// Masked cross-entropy of `model` on `samples`, in eval mode.
pub fn evaluate(model: ModelRef<'_>, samples: &[EncodedSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut weighted = 0.0f64;
    let mut tokens = 0usize;
    for s in samples {
        let (inputs, targets, mask) = s.shifted();
        let tape = Tape::new();
        let logits = forward_traced(&tape, model, inputs, None, &mut Mode::Eval)?;
        let loss = logits.cross_entropy(targets, mask)?.item();
        let n = mask.iter().filter(|&&m| m != 0).count();
        weighted += f64::from(loss) * n as f64;
        tokens += n;
        per_sample.push(loss);
    }
    Ok(EvalReport {
        mean_loss: (weighted / tokens as f64) as f32,
        per_sample,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 4,
            seq_len: 64,
            lr: 3e-3,
            warmup_steps: 20,
            seed: 0,
        }
    }
}

/// Full-parameter next-token training of `weights` on random windows of the
/// token stream. Produces the frozen base that adapters are later trained on.
/// Returns the per-step loss.
pub fn pretrain(
    cfg: &ModelConfig,
    weights: &mut ModelWeights,
    stream: &[u32],
    pcfg: &PretrainConfig,
) -> Result<Vec<f32>> {
    let window = pcfg.seq_len + 1;
    if pcfg.seq_len == 0 || pcfg.seq_len > cfg.max_seq_len {
        return Err(Error::Config(format!(
            "pretrain seq_len must be in 1..={}",
            cfg.max_seq_len
        )));
    }
    if stream.len() < window {
        return Err(Error::Data(format!(
            "token stream of {} is shorter than one window of {window}",
            stream.len()
        )));
    }
    if weights.is_quantized() {
        return Err(Error::Config("cannot pretrain quantized weights".into()));
    }
    let schedule = TrainConfig {
        lr: pcfg.lr,
        warmup_steps: pcfg.warmup_steps,
        ..TrainConfig::default()
    };
    weights.set_trainable(true);
    let mut opt = AdamW::default();
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let mut history = Vec::with_capacity(pcfg.steps);
    let mask = vec![1u8; pcfg.seq_len];
    for step in 0..pcfg.steps {
        let starts: Vec<usize> = (0..pcfg.batch)
            .map(|_| rand::Rng::random_range(&mut rng, 0..=stream.len() - window))
            .collect();
        let grads = {
            let model = ModelRef::new(cfg, weights);
            let tape = Tape::new();
            let mut total = None;
            for &s in &starts {
                let w = &stream[s..s + window];
                let logits = forward_traced(&tape, model, &w[..pcfg.seq_len], None, &mut Mode::Eval)?;
                let loss = logits.cross_entropy(&w[1..], &mask)?.scale(1.0 / pcfg.batch as f32);
                total = Some(match total {
                    None => loss,
                    Some(acc) => loss.add(acc)?,
                });
            }
            let total = total.ok_or_else(|| Error::Config("pretrain batch must be positive".into()))?;
            let l = total.item();
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    samples: starts,
                });
            }
            history.push(l);
            tape.backward(total)?
        };
        let mut params: Vec<(String, &mut Tensor)> = Vec::new();
        for (name, w) in weights.iter_mut() {
            if let crate::model::WeightTensor::Dense(t) = w {
                t.zero_grad();
                grads.accumulate_into(name, t)?;
                params.push((name.to_string(), t));
            }
        }
        opt.step(schedule.lr_at(step), params);
    }
    weights.set_trainable(false);
    Ok(history)
}
