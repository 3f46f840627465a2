//! Autoregressive decoding: repetition penalty, temperature, top-k and
//! nucleus filtering, stop conditions, UTF-8-safe streaming and chat state.

use std::collections::BTreeSet;
use std::fmt;
use std::time::SystemTime;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{BOS, EOS};
use crate::data::{render_chat_prompt, Tokenizer, Turn};
use crate::error::{Error, Result};
use crate::model::{forward, KvCache, ModelRef};

/// Stop sequence appended by [`chat_step`] so a reply ends where the next
/// user turn would begin.
pub const CHAT_STOP: &str = "\nUser:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub max_new_tokens: usize,
    pub temperature: f32,
    pub top_k: Option<usize>,
    pub top_p: Option<f32>,
    pub repetition_penalty: f32,
    pub seed: u64,
    #[serde(rename = "stop", alias = "stop_sequences")]
    pub stop_sequences: Vec<String>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 128,
            temperature: 0.7,
            top_k: Some(40),
            top_p: Some(0.9),
            repetition_penalty: 1.3,
            seed: 0,
            stop_sequences: Vec::new(),
        }
    }
}

impl GenParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            temperature: 0.0,
            top_k: None,
            top_p: None,
            repetition_penalty: 1.0,
            ..Self::default()
        }
    }

    /// Field-level problems, each as `(field, message)`.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            out.push(("temperature", format!("must be a non-negative number, got {}", self.temperature)));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                out.push(("top_p", format!("must be in (0, 1], got {p}")));
            }
        }
        if self.top_k == Some(0) {
            out.push(("top_k", "must be at least 1".to_string()));
        }
        if !(self.repetition_penalty.is_finite() && self.repetition_penalty >= 1.0) {
            out.push((
                "repetition_penalty",
                format!("must be at least 1.0, got {}", self.repetition_penalty),
            ));
        }
        if self.stop_sequences.iter().any(String::is_empty) {
            out.push(("stop", "stop sequences must be non-empty".to_string()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().into_iter().next() {
            None => Ok(()),
            Some((field, msg)) => Err(Error::Config(format!("{field} {msg}"))),
        }
    }
}

/// Divides positive and multiplies negative logits of every id in `seen`.
pub fn penalize(logits: &mut [f32], seen: &BTreeSet<u32>, penalty: f32) {
    if penalty == 1.0 {
        return;
    }
    for &id in seen {
        if let Some(l) = logits.get_mut(id as usize) {
            *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
        }
    }
}

/// Lowest id among the maxima.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Surviving `(id, probability)` pairs after temperature, top-k and top-p,
/// renormalized and ordered by descending probability (ties by lower id).
/// Expects `temperature > 0`; penalties must already be applied.
pub fn candidates(logits: &[f32], params: &GenParams) -> Vec<(u32, f64)> {
    let t = f64::from(params.temperature);
    let mut order: Vec<u32> = (0..logits.len() as u32).collect();
    order.sort_by(|&a, &b| {
        logits[b as usize]
            .total_cmp(&logits[a as usize])
            .then(a.cmp(&b))
    });
    if let Some(k) = params.top_k {
        order.truncate(k.max(1));
    }
    let max = f64::from(logits[order[0] as usize]);
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((f64::from(logits[i as usize]) - max) / t).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    let mut kept: Vec<(u32, f64)> = order.into_iter().zip(weights.into_iter().map(|w| w / z)).collect();
    if let Some(p) = params.top_p {
        let mut cum = 0.0;
        let mut n = 0;
        for &(_, q) in &kept {
            cum += q;
            n += 1;
            if cum >= f64::from(p) {
                break;
            }
        }
        kept.truncate(n.max(1));
        let z: f64 = kept.iter().map(|c| c.1).sum();
        kept.iter_mut().for_each(|c| c.1 /= z);
    }
    kept
}

/// Penalty, then greedy or filtered sampling.
pub fn sample_next(logits: &[f32], seen: &BTreeSet<u32>, params: &GenParams, rng: &mut ChaCha8Rng) -> u32 {
    let mut logits = logits.to_vec();
    penalize(&mut logits, seen, params.repetition_penalty);
    if params.temperature == 0.0 || params.top_k == Some(1) {
        return argmax(&logits);
    }
    let kept = candidates(&logits, params);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(id, p) in &kept {
        cum += p;
        if u < cum {
            return id;
        }
    }
    kept.last().expect("top-1 always kept").0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    StopToken,
    StopSequence,
    Length,
}

impl fmt::Display for FinishReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinishReason::StopToken => "stop_token",
            FinishReason::StopSequence => "stop_sequence",
            FinishReason::Length => "length",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub finish_reason: FinishReason,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    /// Sampled ids in order, including a final eos when one was produced.
    pub token_ids: Vec<u32>,
}

/// Turns generated bytes into text chunks that never split a UTF-8 character
/// and hold back enough bytes to catch a stop sequence that is still forming.
struct Emitter {
    bytes: Vec<u8>,
    emitted: usize,
    holdback: usize,
    text: String,
}

impl Emitter {
    fn new(stops: &[String]) -> Self {
        Self {
            bytes: Vec::new(),
            emitted: 0,
            holdback: stops.iter().map(String::len).max().unwrap_or(1).saturating_sub(1),
            text: String::new(),
        }
    }

    fn emit_until(&mut self, end: usize, last: bool, sink: &mut dyn FnMut(&str)) {
        while self.emitted < end {
            let s = &self.bytes[self.emitted..end];
            let (take, chunk) = match std::str::from_utf8(s) {
                Ok(v) => (s.len(), v.to_string()),
                Err(e) => match e.error_len() {
                    Some(bad) => {
                        let n = e.valid_up_to() + bad;
                        (n, String::from_utf8_lossy(&s[..n]).into_owned())
                    }
                    None if last => (s.len(), String::from_utf8_lossy(s).into_owned()),
                    None => (e.valid_up_to(), String::from_utf8_lossy(&s[..e.valid_up_to()]).into_owned()),
                },
            };
            if take == 0 {
                break;
            }
            self.emitted += take;
            if !chunk.is_empty() {
                sink(&chunk);
                self.text.push_str(&chunk);
            }
        }
    }

    /// Adds bytes; returns the cut offset when a stop sequence now occurs.
    fn push(&mut self, piece: &[u8], stops: &[String], sink: &mut dyn FnMut(&str)) -> Option<usize> {
        self.bytes.extend_from_slice(piece);
        let from = self.emitted;
        let hit = stops
            .iter()
            .filter_map(|s| find(&self.bytes[from..], s.as_bytes()).map(|i| i + from))
            .min();
        match hit {
            Some(cut) => {
                self.emit_until(cut, true, sink);
                Some(cut)
            }
            None => {
                let safe = self.bytes.len().saturating_sub(self.holdback).max(self.emitted);
                self.emit_until(safe, false, sink);
                None
            }
        }
    }

    fn finish(&mut self, sink: &mut dyn FnMut(&str)) -> String {
        let end = self.bytes.len();
        self.emit_until(end, true, sink);
        std::mem::take(&mut self.text)
    }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

fn prompt_ids(model: ModelRef<'_>, tok: &Tokenizer, prompt: &str) -> Result<Vec<u32>> {
    let mut ids = tok.encode(prompt);
    if ids.is_empty() {
        ids.push(BOS);
    }
    if ids.len() >= model.cfg.max_seq_len {
        return Err(Error::ContextLength {
            needed: ids.len() + 1,
            max: model.cfg.max_seq_len,
        });
    }
    Ok(ids)
}

fn last_row(logits: &crate::tensor::Tensor) -> Vec<f32> {
    logits.row(logits.shape()[0] - 1).to_vec()
}

fn decode_loop(
    model: ModelRef<'_>,
    tok: &Tokenizer,
    prompt: &str,
    params: &GenParams,
    on_text: &mut dyn FnMut(&str),
    next_logits: &mut dyn FnMut(&[u32], usize) -> Result<Vec<f32>>,
) -> Result<Generation> {
    params.validate()?;
    let mut ids = prompt_ids(model, tok, prompt)?;
    let prompt_tokens = ids.len();
    let mut seen: BTreeSet<u32> = ids.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut emitter = Emitter::new(&params.stop_sequences);
    let mut generated = Vec::new();
    let mut finish = FinishReason::Length;
    let mut fed = 0;
    while generated.len() < params.max_new_tokens && ids.len() < model.cfg.max_seq_len + 1 {
        let logits = next_logits(&ids, fed)?;
        fed = ids.len();
        let next = sample_next(&logits, &seen, params, &mut rng);
        generated.push(next);
        if next == EOS {
            finish = FinishReason::StopToken;
            break;
        }
        if emitter
            .push(tok.token_bytes(next), &params.stop_sequences, on_text)
            .is_some()
        {
            finish = FinishReason::StopSequence;
            break;
        }
        seen.insert(next);
        ids.push(next);
        if ids.len() >= model.cfg.max_seq_len {
            break;
        }
    }
    let text = if finish == FinishReason::StopSequence {
        std::mem::take(&mut emitter.text)
    } else {
        emitter.finish(on_text)
    };
    Ok(Generation {
        text,
        finish_reason: finish,
        prompt_tokens,
        completion_tokens: generated.len(),
        token_ids: generated,
    })
}

/// Incremental decoding with a key/value cache. `on_text` receives the output
/// in order as UTF-8-safe chunks whose concatenation is the returned text.
pub fn generate_stream(
    model: ModelRef<'_>,
    tok: &Tokenizer,
    prompt: &str,
    params: &GenParams,
    mut on_text: impl FnMut(&str),
) -> Result<Generation> {
    let mut cache = KvCache::new(model.cfg);
    decode_loop(model, tok, prompt, params, &mut on_text, &mut |ids, fed| {
        Ok(last_row(&forward(model, &ids[fed..], Some(&mut cache))?))
    })
}

pub fn generate(model: ModelRef<'_>, tok: &Tokenizer, prompt: &str, params: &GenParams) -> Result<Generation> {
    generate_stream(model, tok, prompt, params, |_| {})
}

/// Reference decoder that re-runs the full sequence for every token.
pub fn generate_uncached(
    model: ModelRef<'_>,
    tok: &Tokenizer,
    prompt: &str,
    params: &GenParams,
) -> Result<Generation> {
    decode_loop(model, tok, prompt, params, &mut |_| {}, &mut |ids, _| {
        Ok(last_row(&forward(model, ids, None)?))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatSession {
    pub id: String,
    turns: Vec<Turn>,
    pub params: GenParams,
    pub adapter_id: Option<String>,
    pub created: SystemTime,
    pub updated: SystemTime,
}

impl ChatSession {
    pub fn new(id: impl Into<String>, params: GenParams) -> Self {
        let now = SystemTime::now();
        Self {
            id: id.into(),
            turns: Vec::new(),
            params,
            adapter_id: None,
            created: now,
            updated: now,
        }
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    /// Prompt that the next reply to `user_text` would be generated from.
    pub fn prompt_for(&self, user_text: &str) -> Result<String> {
        let mut turns = self.turns.clone();
        turns.push(Turn::user(user_text));
        render_chat_prompt(&turns)
    }
}

/// Appends `user_text`, generates the assistant reply from the rendered
/// history and appends it. On error the session is left unchanged.
pub fn chat_step(
    session: &mut ChatSession,
    model: ModelRef<'_>,
    tok: &Tokenizer,
    user_text: &str,
    on_text: impl FnMut(&str),
) -> Result<Generation> {
    let prompt = session.prompt_for(user_text)?;
    let mut params = session.params.clone();
    if !params.stop_sequences.iter().any(|s| s == CHAT_STOP) {
        params.stop_sequences.push(CHAT_STOP.to_string());
    }
    let generation = generate_stream(model, tok, &prompt, &params, on_text)?;
    session.turns.push(Turn::user(user_text));
    session.turns.push(Turn::assistant(generation.text.clone()));
    session.updated = SystemTime::now();
    Ok(generation)
}
