//! The `tinylora` command line.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use tinylora::data::{
    encode_dataset, merge_datasets, read_jsonl, render_instruction_prompt, train_tokenizer, write_jsonl,
    EncodedSample, Example, PromptPolicy, Tokenizer, DEFAULT_TEMPLATE,
};
use tinylora::infer::{self, ChatSession, GenParams};
use tinylora::lora::{self, LoraAdapter, LoraConfig};
use tinylora::model::{self, init_weights, ModelConfig, ModelRef, ModelWeights};
use tinylora::quant::{self, BaseQuant, Scheme};
use tinylora::train::{self, load_checkpoint, save_checkpoint, Checkpoint, PretrainConfig, TrainConfig, Trainer};

use crate::config::expand_args;
use crate::error::{CliError, CliResult};
use crate::http::{self, AppState};
use crate::registry::{adapter_file, load_base, ModelRegistry};

#[derive(Debug, Parser)]
#[command(name = "tinylora", version, about = "Instruction tuning of small LLaMA-style models with LoRA adapters")]
#[command(args_override_self = true)]
pub struct Cli {
    /// TOML file whose `[common]` and `[<subcommand>]` tables supply default flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Initialize a base model and optionally pretrain it on a corpus.
    Pretrain(PretrainArgs),
    /// Learn byte-level BPE merges from text or JSONL corpora.
    TokenizerTrain(TokenizerArgs),
    /// Concatenate, optionally deduplicate, and shuffle JSONL datasets.
    DatasetMerge(MergeDataArgs),
    /// Train a LoRA adapter on a frozen base.
    Train(TrainArgs),
    /// Continue fine-tuning an existing adapter on new data.
    Continue(ContinueArgs),
    /// Masked loss of a base (plus optional adapter) on a dataset.
    Eval(EvalArgs),
    /// Fold an adapter into its base and write a dense checkpoint.
    MergeAdapter(MergeAdapterArgs),
    /// Quantize a base checkpoint and report storage figures.
    Quantize(QuantizeArgs),
    /// Complete a single prompt.
    Generate(GenerateArgs),
    /// Interactive multi-turn chat on the terminal.
    Chat(ChatArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Text or JSONL corpus; omit to only initialize.
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 20)]
    pub warmup_steps: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct TokenizerArgs {
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = DEFAULT_TEMPLATE)]
    pub template: String,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct MergeDataArgs {
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Drop exact duplicate records (first occurrence wins).
    #[arg(long)]
    pub dedup: bool,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct BaseArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value = DEFAULT_TEMPLATE)]
    pub template: String,
    #[arg(long)]
    pub allow_mixed_templates: bool,
    #[arg(long, default_value_t = 256)]
    pub cutoff_len: usize,
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 128)]
    pub effective_batch: usize,
    #[arg(long, default_value_t = 4)]
    pub micro_batch: usize,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f32,
    #[arg(long, default_value_t = 100)]
    pub warmup_steps: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Frozen-base storage during training: none, int8 or nf4.
    #[arg(long, default_value = "int8")]
    pub quant: BaseQuant,
    #[arg(long, default_value_t = quant::DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
    /// Checkpoint every N steps (0: only at epoch ends and the end).
    #[arg(long, default_value_t = 0)]
    pub save_every: usize,
}

impl OptimArgs {
    fn config(&self, cutoff_len: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            effective_batch: self.effective_batch,
            micro_batch: self.micro_batch,
            epochs: self.epochs,
            lr: self.lr,
            cutoff_len,
            warmup_steps: self.warmup_steps,
            seed,
            quant_scheme: self.quant,
            quant_block_size: self.block_size,
            save_every_steps: self.save_every,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub base: BaseArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub lora_r: usize,
    #[arg(long, default_value_t = 16.0)]
    pub lora_alpha: f32,
    #[arg(long, default_value_t = 0.05)]
    pub lora_dropout: f32,
    /// Module name suffixes to adapt.
    #[arg(long = "target", default_values_t = ["q_proj".to_string(), "v_proj".to_string()])]
    pub targets: Vec<String>,
    /// Resume from the checkpoint in `--out` if there is one.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct ContinueArgs {
    #[command(flatten)]
    pub base: BaseArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Checkpoint directory of the prior run.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub base: BaseArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Adapter file or checkpoint directory.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long, default_value = "none")]
    pub quant: BaseQuant,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct MergeAdapterArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub adapter: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Merge even if the adapter was trained against a different base.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub scheme: Scheme,
    #[arg(long, default_value_t = quant::DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long, default_value_t = 128)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f32,
    /// 0 disables top-k.
    #[arg(long, default_value_t = 40)]
    pub top_k: usize,
    /// 1 disables nucleus sampling.
    #[arg(long, default_value_t = 0.9)]
    pub top_p: f32,
    #[arg(long, default_value_t = 1.3)]
    pub repetition_penalty: f32,
    #[arg(long)]
    pub stop: Vec<String>,
}

impl SamplingArgs {
    fn params(&self, seed: u64) -> CliResult<GenParams> {
        let p = GenParams {
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            top_k: (self.top_k > 0).then_some(self.top_k),
            top_p: (self.top_p < 1.0).then_some(self.top_p),
            repetition_penalty: self.repetition_penalty,
            seed,
            stop_sequences: self.stop.clone(),
        };
        p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(p)
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub base: BaseArgs,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Quantize a dense base on load: none, int8 or nf4.
    #[arg(long, default_value = "none")]
    pub quant: BaseQuant,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Raw prompt text, fed to the model as is.
    #[arg(long, conflicts_with = "instruction")]
    pub prompt: Option<String>,
    /// Instruction rendered through the prompt template.
    #[arg(long)]
    pub instruction: Option<String>,
    #[arg(long, default_value = "", requires = "instruction")]
    pub input: String,
    #[arg(long, default_value = DEFAULT_TEMPLATE)]
    pub template: String,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML model/adapter registry; without it the service starts empty.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long, env = http::BIND_ENV, default_value = http::DEFAULT_BIND)]
    pub bind: String,
    /// Minutes before an idle chat session is dropped.
    #[arg(long, default_value_t = 30)]
    pub idle_minutes: u64,
    #[command(flatten)]
    pub seed: SeedArg,
}

/// Text of every corpus file; JSONL records are rendered through `template`.
fn corpus_text(paths: &[PathBuf], template: &str) -> CliResult<String> {
    let mut text = String::new();
    for p in paths {
        if p.extension().is_some_and(|e| e == "jsonl") {
            for ex in read_jsonl(p)? {
                let (prompt, target) = ex.prompt_and_target(template)?;
                text.push_str(&prompt);
                text.push_str(&target);
                text.push_str("\n\n");
            }
        } else {
            text.push_str(&std::fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?);
        }
    }
    Ok(text)
}

/// Token stream for pretraining. JSONL records are encoded the way
/// fine-tuning sees them: prompt ids, target ids, then end-of-sequence.
fn pretraining_tokens(paths: &[PathBuf], tok: &Tokenizer) -> CliResult<Vec<u32>> {
    let mut ids = Vec::new();
    for p in paths {
        if p.extension().is_some_and(|e| e == "jsonl") {
            for ex in read_jsonl(p)? {
                let (prompt, target) = ex.prompt_and_target(DEFAULT_TEMPLATE)?;
                ids.extend(tok.encode(&prompt));
                ids.extend(tok.encode(&target));
                ids.push(tok.eos());
            }
        } else {
            ids.extend(tok.encode(&corpus_text(std::slice::from_ref(p), DEFAULT_TEMPLATE)?));
        }
    }
    Ok(ids)
}

fn load_examples(paths: &[PathBuf]) -> CliResult<Vec<Example>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_jsonl(p)?);
    }
    Ok(all)
}

fn encode(args: &DataArgs, tok: &Tokenizer) -> CliResult<Vec<EncodedSample>> {
    let examples = load_examples(&args.data)?;
    let policy = PromptPolicy {
        template_id: args.template.clone(),
        allow_mixed_templates: args.allow_mixed_templates,
    };
    let ds = encode_dataset(&examples, tok, &policy, args.cutoff_len).map_err(|e| match e {
        tinylora::Error::Config(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    if ds.dropped > 0 || ds.truncated > 0 {
        eprintln!("{} examples dropped (prompt exceeds cutoff), {} truncated", ds.dropped, ds.truncated);
    }
    Ok(ds.samples)
}

fn load_adapter_arg(path: &Path) -> CliResult<LoraAdapter> {
    Ok(lora::load_adapter(adapter_file(path))?)
}

struct Loaded {
    cfg: ModelConfig,
    weights: ModelWeights,
    tok: Tokenizer,
    adapter: Option<LoraAdapter>,
}

impl Loaded {
    fn model(&self) -> ModelRef<'_> {
        ModelRef::new(&self.cfg, &self.weights).with_adapter(self.adapter.as_ref())
    }
}

fn load_model(args: &ModelArgs) -> CliResult<Loaded> {
    let (cfg, weights) = load_base(&args.base.base, args.quant)?;
    let tok = Tokenizer::load(&args.base.tokenizer)?;
    let adapter = args.adapter.as_deref().map(load_adapter_arg).transpose()?;
    if let Some(a) = &adapter {
        a.check_base(&weights)?;
    }
    if weights.is_quantized() {
        eprintln!("{}", quant::memory_report(&weights, quant::DEFAULT_BLOCK_SIZE));
    }
    Ok(Loaded { cfg, weights, tok, adapter })
}

fn report_progress(out: &Path) -> impl FnMut(&Checkpoint) -> tinylora::Result<()> + '_ {
    move |ckpt| {
        if let Some(l) = ckpt.final_loss() {
            eprintln!("step {} epoch {} loss {l:.4}", ckpt.step, ckpt.epoch);
        }
        save_checkpoint(out, ckpt)
    }
}

fn finish_run(out: &Path, ckpt: &Checkpoint) -> CliResult<()> {
    save_checkpoint(out, ckpt)?;
    println!(
        "run {} finished at step {} (final loss {}), saved to {}",
        ckpt.run_id,
        ckpt.step,
        ckpt.final_loss().map_or("n/a".to_string(), |l| format!("{l:.4}")),
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> CliResult<()> {
    let tok = Tokenizer::load(&a.tokenizer)?;
    let cfg = ModelConfig {
        vocab_size: tok.vocab_size(),
        dim: a.dim,
        n_layers: a.layers,
        n_heads: a.heads,
        max_seq_len: a.max_seq_len,
        ..ModelConfig::toy(tok.vocab_size())
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut weights = init_weights(&cfg, a.seed.seed)?;
    if !a.corpus.is_empty() && a.steps > 0 {
        let stream = pretraining_tokens(&a.corpus, &tok)?;
        let pcfg = PretrainConfig {
            steps: a.steps,
            batch: a.batch,
            seq_len: a.seq_len,
            lr: a.lr,
            warmup_steps: a.warmup_steps,
            seed: a.seed.seed,
        };
        let losses = train::pretrain(&cfg, &mut weights, &stream, &pcfg)?;
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            eprintln!("pretrained {} steps on {} tokens: loss {first:.4} -> {last:.4}", losses.len(), stream.len());
        }
    }
    model::save_model(&a.out, &cfg, &weights)?;
    println!("{cfg}");
    println!("fingerprint {:016x}", weights.fingerprint());
    Ok(())
}

fn cmd_tokenizer(a: &TokenizerArgs) -> CliResult<()> {
    let text = corpus_text(&a.corpus, &a.template)?;
    let tok = train_tokenizer(text.as_bytes(), a.vocab_size)?;
    tok.save(&a.out)?;
    println!("vocab {} ({} merges) written to {}", tok.vocab_size(), tok.merges().len(), a.out.display());
    Ok(())
}

fn cmd_dataset_merge(a: &MergeDataArgs) -> CliResult<()> {
    let merged = merge_datasets(&a.inputs, a.seed.seed, a.dedup)?;
    write_jsonl(&a.out, &merged.examples)?;
    for (p, n) in &merged.per_source {
        println!("{}: {n}", p.display());
    }
    println!("total {} ({} duplicates removed)", merged.examples.len(), merged.duplicates_removed);
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let (cfg, weights) = model::load_model(&a.base.base)?;
    let tok = Tokenizer::load(&a.base.tokenizer)?;
    let samples = encode(&a.data, &tok)?;
    let tcfg = a.optim.config(a.data.cutoff_len, a.seed.seed);
    let usage = |e: tinylora::Error| match e {
        tinylora::Error::Config(m) => CliError::Usage(m),
        other => other.into(),
    };
    let mut trainer = if a.resume && a.out.join("trainer_state").exists() {
        let ckpt = load_checkpoint(&a.out)?;
        eprintln!("resuming run {} at step {}", ckpt.run_id, ckpt.step);
        Trainer::resume(&cfg, &weights, samples, &tcfg, ckpt)?
    } else {
        let lcfg = LoraConfig {
            r: a.lora_r,
            alpha: a.lora_alpha,
            dropout: a.lora_dropout,
            target_modules: a.targets.iter().cloned().collect(),
        };
        Trainer::new(&cfg, &weights, samples, &tcfg, &lcfg).map_err(usage)?
    };
    eprintln!(
        "{} trainable parameters, {} steps",
        trainer.adapter().num_params(),
        trainer.total_steps()
    );
    trainer.run(report_progress(&a.out))?;
    finish_run(&a.out, trainer.checkpoint())
}

fn cmd_continue(a: &ContinueArgs) -> CliResult<()> {
    let (cfg, weights) = model::load_model(&a.base.base)?;
    let tok = Tokenizer::load(&a.base.tokenizer)?;
    let samples = encode(&a.data, &tok)?;
    let prior = load_checkpoint(&a.from)?;
    let tcfg = a.optim.config(a.data.cutoff_len, a.seed.seed);
    let ckpt = train::continue_finetune(&cfg, &weights, &prior, samples, &tcfg, report_progress(&a.out))?;
    finish_run(&a.out, &ckpt)
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let (cfg, weights) = load_base(&a.base.base, a.quant)?;
    let tok = Tokenizer::load(&a.base.tokenizer)?;
    let adapter = a.adapter.as_deref().map(load_adapter_arg).transpose()?;
    if let Some(ad) = &adapter {
        ad.check_base(&weights)?;
    }
    let samples = encode(&a.data, &tok)?;
    let report = train::evaluate(ModelRef::new(&cfg, &weights).with_adapter(adapter.as_ref()), &samples)?;
    let tokens: usize = samples.iter().map(|s| s.shifted().2.iter().filter(|&&m| m != 0).count()).sum();
    println!(
        "{}",
        serde_json::json!({
            "mean_loss": report.mean_loss,
            "samples": samples.len(),
            "tokens": tokens,
            "per_sample": report.per_sample,
        })
    );
    Ok(())
}

fn cmd_merge_adapter(a: &MergeAdapterArgs) -> CliResult<()> {
    let (cfg, weights) = model::load_model(&a.base)?;
    let adapter = load_adapter_arg(&a.adapter)?;
    let merged = lora::merge(&weights, &adapter, a.force)?;
    model::save_model(&a.out, &cfg, &merged)?;
    println!("merged {} modules into {}", adapter.modules().count(), a.out.display());
    Ok(())
}

fn cmd_quantize(a: &QuantizeArgs) -> CliResult<()> {
    let (cfg, weights) = model::load_model(&a.base)?;
    if weights.is_quantized() {
        return Err(CliError::Usage(format!("{} is already quantized", a.base.display())));
    }
    let q = quant::quantize_weights(&weights, a.scheme, a.block_size)?;
    model::save_model(&a.out, &cfg, &q)?;
    let report = quant::memory_report(&weights, a.block_size);
    println!("{report}");
    println!("wrote {} ({})", a.out.display(), a.scheme);
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let prompt = match (&a.prompt, &a.instruction) {
        (Some(p), _) => p.clone(),
        (None, Some(ins)) => {
            let ex = tinylora::data::InstructionExample::new(ins.clone(), a.input.clone(), "");
            render_instruction_prompt(&ex, &a.template).map_err(|e| CliError::Usage(e.to_string()))?
        }
        (None, None) => return Err(CliError::Usage("one of --prompt or --instruction is required".into())),
    };
    let params = a.sampling.params(a.seed.seed)?;
    let m = load_model(&a.model)?;
    let mut stdout = std::io::stdout().lock();
    let out = infer::generate_stream(m.model(), &m.tok, &prompt, &params, |chunk| {
        let _ = stdout.write_all(chunk.as_bytes());
        let _ = stdout.flush();
    })?;
    drop(stdout);
    println!();
    eprintln!(
        "[{} prompt tokens, {} completion tokens, finish: {}]",
        out.prompt_tokens, out.completion_tokens, out.finish_reason
    );
    Ok(())
}

fn cmd_chat(a: &ChatArgs) -> CliResult<()> {
    let params = a.sampling.params(a.seed.seed)?;
    let m = load_model(&a.model)?;
    let mut session = ChatSession::new("terminal", params);
    eprintln!("type a message; /reset clears the history, /exit quits");
    let stdin = std::io::stdin();
    let mut line = String::new();
    loop {
        eprint!("User: ");
        line.clear();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim_end_matches(['\r', '\n']);
        match text.trim() {
            "" => continue,
            "/exit" | "/quit" => break,
            "/reset" => {
                session = ChatSession::new("terminal", session.params.clone());
                continue;
            }
            _ => {}
        }
        let mut stdout = std::io::stdout().lock();
        let _ = write!(stdout, "Assistant: ");
        let result = infer::chat_step(&mut session, m.model(), &m.tok, text, |chunk| {
            let _ = stdout.write_all(chunk.as_bytes());
            let _ = stdout.flush();
        });
        let _ = writeln!(stdout);
        drop(stdout);
        if let Err(e) = result {
            eprintln!("error: {e}");
        }
    }
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> CliResult<()> {
    let registry = match &a.registry {
        Some(p) => ModelRegistry::load(p)?,
        None => ModelRegistry::new(),
    };
    let state = Arc::new(
        AppState::new(registry, a.registry.clone())
            .with_idle_timeout(std::time::Duration::from_secs(a.idle_minutes.max(1) * 60)),
    );
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|e| CliError::Runtime(format!("bind {}: {e}", a.bind)))?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        http::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}

pub fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::TokenizerTrain(a) => cmd_tokenizer(a),
        Command::DatasetMerge(a) => cmd_dataset_merge(a),
        Command::Train(a) => cmd_train(a),
        Command::Continue(a) => cmd_continue(a),
        Command::Eval(a) => cmd_eval(a),
        Command::MergeAdapter(a) => cmd_merge_adapter(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Chat(a) => cmd_chat(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_args(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
