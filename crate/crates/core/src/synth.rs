//! Seeded synthetic corpora standing in for real instruction data at desk
//! scale: a general instruction mix for pretraining the toy base, a fixed
//! set of pairs to memorize, and two related lookup tasks for continued
//! fine-tuning experiments. Also the recipe for the pretrained toy base those
//! experiments run on.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use crate::data::{
    encode_sample, render_instruction_prompt, train_tokenizer, EncodedSample, InstructionExample, Tokenizer,
    DEFAULT_TEMPLATE,
};
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::{init_weights, load_model, save_model, ModelConfig, ModelWeights, ATTN_PROJ, FFN_PROJ};
use crate::quant::BaseQuant;
use crate::train::{pretrain, PretrainConfig, TrainConfig};

pub const NOUNS: [&str; 24] = [
    "cat", "dog", "bird", "fish", "horse", "tiger", "panda", "rabbit", "lamp", "river", "stone", "cloud", "apple",
    "bread", "tea", "rice", "boat", "train", "road", "bridge", "garden", "moon", "forest", "city",
];
pub const ADJECTIVES: [&str; 16] = [
    "red", "blue", "green", "quiet", "bright", "small", "large", "warm", "cold", "old", "young", "soft", "fast", "slow",
    "happy", "calm",
];
pub const VERBS: [&str; 12] = [
    "sees", "likes", "finds", "keeps", "follows", "carries", "paints", "visits", "watches", "greets", "helps", "needs",
];
const HANZI: [&str; 8] = ["猫", "狗", "鸟", "鱼", "茶", "米", "月", "山"];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    format!(
        "the {} {} {} the {} {}.",
        ADJECTIVES.choose(rng).unwrap(),
        NOUNS.choose(rng).unwrap(),
        VERBS.choose(rng).unwrap(),
        ADJECTIVES.choose(rng).unwrap(),
        NOUNS.choose(rng).unwrap()
    )
}

/// A random instruction pair in the style of the general mix.
pub fn general_example(rng: &mut ChaCha8Rng) -> InstructionExample {
    match rng.random_range(0..4) {
        0 => {
            let noun = NOUNS.choose(rng).unwrap();
            InstructionExample::new(format!("Describe the {noun}."), "", sentence(rng))
        }
        1 => {
            let items: Vec<String> = (0..rng.random_range(2..4)).map(|_| sentence(rng)).collect();
            InstructionExample::new("Write a short list.", "", crate::data::structure_output(&items))
        }
        2 => {
            let s = sentence(rng);
            InstructionExample::new("Repeat the input.", s.clone(), s)
        }
        _ => {
            let i = rng.random_range(0..HANZI.len());
            InstructionExample::new(
                format!("Translate {}.", HANZI[i]),
                "",
                format!("{} means {}.", HANZI[i], NOUNS[i % NOUNS.len()]),
            )
        }
    }
}

pub fn general_examples(seed: u64, n: usize) -> Vec<InstructionExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| general_example(&mut rng)).collect()
}

/// Rendered prompt+response text of each example, separated by blank lines;
/// used as the pretraining stream and tokenizer corpus.
pub fn pretraining_text(examples: &[InstructionExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&render_instruction_prompt(ex, DEFAULT_TEMPLATE).expect("default template"));
        out.push_str(&ex.output);
        out.push_str("\n\n");
    }
    out
}

/// Token stream for pretraining: each example encoded exactly as fine-tuning
/// encodes it (prompt ids, response ids, end-of-sequence), back to back.
pub fn pretraining_stream(examples: &[InstructionExample], tok: &Tokenizer) -> Vec<u32> {
    let mut out = Vec::new();
    for ex in examples {
        out.extend(tok.encode(&render_instruction_prompt(ex, DEFAULT_TEMPLATE).expect("default template")));
        out.extend(tok.encode(&ex.output));
        out.push(tok.eos());
    }
    out
}

/// Sixteen fixed pairs whose responses have to be memorized.
pub fn overfit_pairs() -> Vec<InstructionExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0f17);
    let mut nouns = NOUNS.to_vec();
    nouns.shuffle(&mut rng);
    nouns
        .iter()
        .take(16)
        .enumerate()
        .map(|(i, noun)| {
            let out = format!(
                "the {} {} {} the {}.",
                ADJECTIVES[(i * 5 + 3) % ADJECTIVES.len()],
                noun,
                VERBS[(i * 7 + 1) % VERBS.len()],
                NOUNS[(i * 11 + 4) % NOUNS.len()]
            );
            InstructionExample::new(format!("Tell fact {} about the {noun}.", i + 1), "", out)
        })
        .collect()
}

/// One-word lookup task: the answer for each noun comes from `answers`
/// through a seeded assignment.
fn lookup_task(question: &str, answers: &[&str], seed: u64) -> Vec<InstructionExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NOUNS
        .iter()
        .map(|noun| {
            let a = answers.choose(&mut rng).unwrap();
            InstructionExample::new(format!("{question} {noun}?"), "", format!("the {noun} is {a}."))
        })
        .collect()
}

/// Task A of the continued fine-tuning experiment.
pub fn task_a() -> Vec<InstructionExample> {
    lookup_task("What color is the", &ADJECTIVES[..6], 0xa)
}

/// Task B: the same nouns, a different attribute.
pub fn task_b() -> Vec<InstructionExample> {
    lookup_task("What speed is the", &ADJECTIVES[10..], 0xb)
}

/// Recipe for the desk-scale base that the fixture experiments share.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseRecipe {
    pub corpus_seed: u64,
    pub corpus_size: usize,
    pub vocab_size: usize,
    pub init_seed: u64,
    pub pretrain: PretrainConfig,
}

impl Default for BaseRecipe {
    fn default() -> Self {
        Self {
            corpus_seed: 1,
            corpus_size: 3000,
            vocab_size: 512,
            init_seed: 7,
            pretrain: PretrainConfig {
                steps: 3000,
                batch: 4,
                seq_len: 128,
                lr: 3e-3,
                warmup_steps: 30,
                seed: 0,
            },
        }
    }
}

impl BaseRecipe {
    /// Short stable tag used to name cached artifacts.
    pub fn tag(&self) -> String {
        let p = &self.pretrain;
        let text = format!(
            "{} {} {} {} {} {} {} {} {} {}",
            self.corpus_seed, self.corpus_size, self.vocab_size, self.init_seed, p.steps, p.batch, p.seq_len, p.lr, p.warmup_steps, p.seed
        );
        format!("{:016x}", crate::hash::fnv1a(text.as_bytes()))
    }
}

pub struct PretrainedBase {
    pub tokenizer: Tokenizer,
    pub cfg: ModelConfig,
    pub weights: ModelWeights,
    /// Loss of each pretraining step; empty when loaded from the cache.
    pub losses: Vec<f32>,
}

/// Trains the tokenizer and pretrains the toy base described by `recipe`.
/// With `cache_dir`, the result is stored there and reused on later calls.
pub fn pretrained_base(recipe: &BaseRecipe, cache_dir: Option<&Path>) -> Result<PretrainedBase> {
    let paths = cache_dir.map(|d| {
        let tag = recipe.tag();
        (d.join(format!("base-{tag}.bin")), d.join(format!("tokenizer-{tag}.txt")))
    });
    if let Some((model_path, tok_path)) = &paths {
        if model_path.exists() && tok_path.exists() {
            if let (Ok((cfg, weights)), Ok(tokenizer)) = (load_model(model_path), Tokenizer::load(tok_path)) {
                return Ok(PretrainedBase { tokenizer, cfg, weights, losses: Vec::new() });
            }
        }
    }
    let general = general_examples(recipe.corpus_seed, recipe.corpus_size);
    let tokenizer = train_tokenizer(pretraining_text(&general).as_bytes(), recipe.vocab_size)?;
    let cfg = ModelConfig::toy(tokenizer.vocab_size());
    let mut weights = init_weights(&cfg, recipe.init_seed)?;
    let stream = pretraining_stream(&general, &tokenizer);
    let losses = pretrain(&cfg, &mut weights, &stream, &recipe.pretrain)?;
    if let (Some(dir), Some((model_path, tok_path))) = (cache_dir, &paths) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        // Written under temporary names first so a reader never sees half a cache.
        let tmp_model = model_path.with_extension("partial.bin");
        save_model(&tmp_model, &cfg, &weights)?;
        let tmp_tok = tok_path.with_extension("partial");
        tokenizer.save(&tmp_tok)?;
        let side = |p: &Path| p.with_extension("cfg");
        std::fs::rename(side(&tmp_model), side(model_path)).map_err(|e| Error::io(model_path, e))?;
        std::fs::rename(&tmp_model, model_path).map_err(|e| Error::io(model_path, e))?;
        std::fs::rename(&tmp_tok, tok_path).map_err(|e| Error::io(tok_path, e))?;
    }
    Ok(PretrainedBase { tokenizer, cfg, weights, losses })
}

/// Adapter settings for the memorization fixture.
pub fn fixture_lora_config() -> LoraConfig {
    LoraConfig {
        target_modules: ATTN_PROJ.iter().chain(FFN_PROJ.iter()).map(|s| s.to_string()).collect(),
        ..LoraConfig::default()
    }
}

/// Optimizer settings for the memorization fixture: 2000 steps of 4 samples.
pub fn fixture_train_config() -> TrainConfig {
    TrainConfig {
        effective_batch: 4,
        micro_batch: 4,
        lr: 3e-3,
        warmup_steps: 20,
        seed: 3,
        quant_scheme: BaseQuant::None,
        max_steps: Some(2000),
        ..TrainConfig::default()
    }
}

/// Encodes instruction pairs with the default template.
pub fn encode_pairs(pairs: &[InstructionExample], tok: &Tokenizer, cutoff_len: usize) -> Result<Vec<EncodedSample>> {
    pairs
        .iter()
        .map(|p| encode_sample(&render_instruction_prompt(p, DEFAULT_TEMPLATE)?, &p.output, tok, cutoff_len))
        .collect()
}
