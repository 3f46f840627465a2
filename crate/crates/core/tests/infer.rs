use std::collections::BTreeSet;

use proptest::prelude::*;
use tinylora::data::{render_chat_prompt, Tokenizer, Turn};
use tinylora::infer::{
    candidates, chat_step, generate, generate_stream, generate_uncached, penalize, ChatSession, FinishReason,
    GenParams, CHAT_STOP,
};
use tinylora::model::{init_weights, ModelConfig, ModelRef, ModelWeights};

const PENALTIES: [f32; 4] = [1.0, 1.3, 2.0, 3.0];

fn toy() -> (ModelConfig, ModelWeights, Tokenizer) {
    let tok = Tokenizer::bytes_only();
    let cfg = ModelConfig { max_seq_len: 64, ..ModelConfig::toy(tok.vocab_size()) };
    let w = init_weights(&cfg, 31).unwrap();
    (cfg, w, tok)
}

fn full_softmax(logits: &[f32], seen: &BTreeSet<u32>, penalty: f32, temperature: f32) -> Vec<f64> {
    let mut l = logits.to_vec();
    penalize(&mut l, seen, penalty);
    let p = GenParams { temperature, top_k: None, top_p: None, ..GenParams::default() };
    let mut probs = vec![0.0; l.len()];
    for (id, q) in candidates(&l, &p) {
        probs[id as usize] = q;
    }
    probs
}

fn sampled(seed: u64, max_new_tokens: usize) -> GenParams {
    GenParams { max_new_tokens, seed, temperature: 1.0, ..GenParams::default() }
}

proptest! {
    #[test]
    fn seen_mass_shrinks_as_penalty_grows(
        logits in prop::collection::vec(-6.0f32..6.0, 2..40),
        picks in prop::collection::vec(0usize..40, 1..6),
        temperature in 0.3f32..2.0,
    ) {
        let seen: BTreeSet<u32> = picks.iter().map(|&p| (p % logits.len()) as u32).collect();
        let mass = |rho| full_softmax(&logits, &seen, rho, temperature).iter().enumerate()
            .filter(|(i, _)| seen.contains(&(*i as u32))).map(|(_, p)| p).sum::<f64>();
        for w in PENALTIES.windows(2) {
            prop_assert!(mass(w[1]) <= mass(w[0]) + 1e-12);
        }
    }

    #[test]
    fn single_seen_token_probability_drops_monotonically(
        logits in prop::collection::vec(-6.0f32..6.0, 2..40),
        pick in 0usize..40,
        temperature in 0.3f32..2.0,
    ) {
        let t = pick % logits.len();
        let seen = BTreeSet::from([t as u32]);
        let probs: Vec<f64> = PENALTIES.iter().map(|&rho| full_softmax(&logits, &seen, rho, temperature)[t]).collect();
        for w in probs.windows(2) {
            if logits[t] != 0.0 {
                prop_assert!(w[1] < w[0], "{probs:?}");
            } else {
                prop_assert!((w[1] - w[0]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn pointwise_drop_can_fail_when_several_tokens_are_seen() {
    // a strongly preferred seen token loses more mass than a weak one
    let logits = [0.1f32, 10.0, 0.0];
    let seen = BTreeSet::from([0u32, 1]);
    let before = full_softmax(&logits, &seen, 1.0, 1.0)[0];
    let after = full_softmax(&logits, &seen, 3.0, 1.0)[0];
    assert!(after > before);
    let mass = |rho| {
        let p = full_softmax(&logits, &seen, rho, 1.0);
        p[0] + p[1]
    };
    assert!(mass(3.0) < mass(1.0));
}

#[test]
fn penalty_reduces_repeats_in_generated_text() {
    let (cfg, w, tok) = toy();
    let m = ModelRef::new(&cfg, &w);
    let distinct = |rho: f32| -> f64 {
        let mut total = 0.0;
        for seed in 0..6 {
            let p = GenParams { repetition_penalty: rho, ..sampled(seed, 40) };
            let g = generate(m, &tok, "abc", &p).unwrap();
            let set: BTreeSet<u32> = g.token_ids.iter().copied().collect();
            total += set.len() as f64 / g.token_ids.len() as f64;
        }
        total
    };
    assert!(distinct(3.0) >= distinct(1.0));
}

#[test]
fn greedy_is_deterministic_and_ignores_seed_and_filters() {
    let (cfg, w, tok) = toy();
    let m = ModelRef::new(&cfg, &w);
    let base = generate(m, &tok, "hello", &GenParams::greedy(24)).unwrap();
    for seed in [1, 2, 99] {
        let p = GenParams { seed, top_k: Some(3), top_p: Some(0.2), ..GenParams::greedy(24) };
        assert_eq!(generate(m, &tok, "hello", &p).unwrap(), base);
    }
    assert_eq!(base.completion_tokens, base.token_ids.len());
    assert_eq!(base.prompt_tokens, 5);
}

#[test]
fn seeded_sampling_reproduces_and_seeds_differ() {
    let (cfg, w, tok) = toy();
    let m = ModelRef::new(&cfg, &w);
    let runs: Vec<_> = (0..5).map(|s| generate(m, &tok, "hi", &sampled(s, 20)).unwrap()).collect();
    for (s, r) in runs.iter().enumerate() {
        assert_eq!(&generate(m, &tok, "hi", &sampled(s as u64, 20)).unwrap(), r);
    }
    let distinct: BTreeSet<_> = runs.iter().map(|r| r.token_ids.clone()).collect();
    assert!(distinct.len() > 1);
}

#[test]
fn cached_and_uncached_decoding_agree() {
    let (cfg, w, tok) = toy();
    let m = ModelRef::new(&cfg, &w);
    for prompt in ["a", "The cat", "多轮对话"] {
        let p = GenParams::greedy(30);
        assert_eq!(generate(m, &tok, prompt, &p).unwrap(), generate_uncached(m, &tok, prompt, &p).unwrap());
    }
    for seed in 0..3 {
        let p = sampled(seed, 30);
        assert_eq!(generate(m, &tok, "x", &p).unwrap(), generate_uncached(m, &tok, "x", &p).unwrap());
    }
}

#[test]
fn generation_respects_context_limit() {
    let (cfg, w, tok) = toy();
    let m = ModelRef::new(&cfg, &w);
    let g = generate(m, &tok, &"z".repeat(60), &GenParams::greedy(100)).unwrap();
    assert!(g.prompt_tokens + g.completion_tokens <= cfg.max_seq_len + 1);
    assert_eq!(g.finish_reason, FinishReason::Length);
}

#[test]
fn stop_sequences_are_cut_and_never_leak() {
    let (cfg, w, tok) = toy();
    let m = ModelRef::new(&cfg, &w);
    let mut hits = 0;
    for seed in 0..40 {
        let free = generate(m, &tok, "q", &sampled(seed, 30)).unwrap();
        // pick a stop string that the unconstrained run produces
        let bytes = tok.decode(&free.token_ids);
        if bytes.len() < 6 {
            continue;
        }
        let stop = String::from_utf8_lossy(&bytes[3..5]).into_owned();
        if stop.contains('\u{FFFD}') {
            continue;
        }
        let p = GenParams { stop_sequences: vec![stop.clone()], ..sampled(seed, 30) };
        let mut chunks = Vec::new();
        let g = generate_stream(m, &tok, "q", &p, |c| chunks.push(c.to_string())).unwrap();
        assert!(!g.text.contains(&stop), "seed {seed}: {:?} in {:?}", stop, g.text);
        assert_eq!(chunks.concat(), g.text);
        if g.finish_reason == FinishReason::StopSequence {
            hits += 1;
            assert!(free.text.starts_with(&g.text));
        }
    }
    assert!(hits > 5, "{hits}");
}

#[test]
fn streamed_chunks_never_split_characters() {
    let (cfg, w, tok) = toy();
    let m = ModelRef::new(&cfg, &w);
    for seed in 0..20 {
        let mut chunks = Vec::new();
        let g = generate_stream(m, &tok, "雪", &sampled(seed, 40), |c| chunks.push(c.to_string())).unwrap();
        assert_eq!(chunks.concat(), g.text);
        assert!(chunks.iter().all(|c| !c.is_empty()));
        let lossy = tok.decode_lossy(&g.token_ids.iter().copied().filter(|&t| !tok.is_special(t)).collect::<Vec<_>>());
        assert_eq!(g.text, lossy);
    }
}

#[test]
fn chat_session_accumulates_turns() {
    let (cfg, w, tok) = toy();
    let m = ModelRef::new(&cfg, &w);
    let mut session = ChatSession::new("s1", GenParams { max_new_tokens: 6, ..GenParams::greedy(6) });
    assert_eq!(session.prompt_for("你好").unwrap(), "User: 你好\n\nAssistant: ");
    let first = chat_step(&mut session, m, &tok, "你好", |_| {}).unwrap();
    assert_eq!(session.turns().len(), 2);
    assert!(!first.text.contains(CHAT_STOP));
    chat_step(&mut session, m, &tok, "ok", |_| {}).unwrap();
    assert_eq!(session.turns().len(), 4);
    assert_eq!(session.turns()[0], Turn::user("你好"));
    assert_eq!(session.turns()[1], Turn::assistant(first.text.clone()));
    let mut expected: Vec<Turn> = session.turns().to_vec();
    expected.push(Turn::user("next"));
    assert_eq!(session.prompt_for("next").unwrap(), render_chat_prompt(&expected).unwrap());
}

#[test]
fn failed_chat_step_leaves_session_unchanged() {
    let (cfg, w, tok) = toy();
    let m = ModelRef::new(&cfg, &w);
    let mut session = ChatSession::new("s2", GenParams::greedy(4));
    chat_step(&mut session, m, &tok, "hi", |_| {}).unwrap();
    let before = session.turns().to_vec();
    assert!(chat_step(&mut session, m, &tok, &"long ".repeat(20), |_| {}).is_err());
    assert_eq!(session.turns(), &before[..]);
}

#[test]
fn invalid_params_are_rejected_before_decoding() {
    let (cfg, w, tok) = toy();
    let m = ModelRef::new(&cfg, &w);
    for p in [
        GenParams { temperature: -1.0, ..GenParams::default() },
        GenParams { top_p: Some(1.5), ..GenParams::default() },
        GenParams { repetition_penalty: 0.9, ..GenParams::default() },
        GenParams { stop_sequences: vec![String::new()], ..GenParams::default() },
    ] {
        assert!(generate(m, &tok, "a", &p).is_err());
    }
}
