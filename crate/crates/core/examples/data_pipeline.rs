//! Trains a byte-level BPE on a small bilingual corpus, renders the
//! instruction and chat templates, and shows the supervision mask.

use tinylora::data::{encode_sample, render_chat_prompt, render_instruction_prompt, train_tokenizer, InstructionExample, Turn};
use tinylora::synth;

fn main() -> tinylora::Result<()> {
    let examples = synth::general_examples(4, 200);
    let corpus = synth::pretraining_text(&examples);
    let tok = train_tokenizer(corpus.as_bytes(), 400)?;
    let probe = "今天天气很好。The weather is nice.";
    let ids = tok.encode(probe);
    println!("vocab {}: {} bytes -> {} tokens", tok.vocab_size(), probe.len(), ids.len());
    println!("round trip exact: {}", tok.decode(&ids) == probe.as_bytes());

    let ex = InstructionExample::new("把句子翻译成英文。", "我喜欢喝茶。", "I like drinking tea.");
    let prompt = render_instruction_prompt(&ex, "default")?;
    println!("--- instruction prompt ---\n{prompt}{}", ex.output);
    let sample = encode_sample(&prompt, &ex.output, &tok, 256)?;
    let (_, targets, mask) = sample.shifted();
    let supervised: Vec<u32> = targets.iter().zip(mask).filter(|(_, m)| **m == 1).map(|(t, _)| *t).collect();
    println!("supervised tokens decode to {:?}", tok.decode_lossy(&supervised));

    let chat = render_chat_prompt(&[Turn::user("你好"), Turn::assistant("你好！有什么可以帮你？"), Turn::user("讲个笑话。")])?;
    println!("--- chat prompt ---\n{chat}");
    Ok(())
}
