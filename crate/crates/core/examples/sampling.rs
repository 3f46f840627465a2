//! Decodes from the pretrained toy base with different sampling settings and
//! shows what the repetition penalty does to a next-token distribution.

use std::collections::BTreeSet;
use std::io::Write;

use tinylora::data::render_instruction_prompt;
use tinylora::infer::{self, candidates, penalize, GenParams};
use tinylora::model::ModelRef;
use tinylora::synth::{self, BaseRecipe};

fn main() -> tinylora::Result<()> {
    let base = synth::pretrained_base(&BaseRecipe::default(), Some(&std::env::temp_dir().join("tinylora-cache")))?;
    let (tok, model) = (&base.tokenizer, ModelRef::new(&base.cfg, &base.weights));
    let prompt = render_instruction_prompt(&synth::general_examples(1, 1)[0], "default")?;
    println!("{prompt}");

    let greedy = infer::generate(model, tok, &prompt, &GenParams::greedy(48))?;
    println!("greedy: {:?} ({})", greedy.text, greedy.finish_reason);
    for seed in 0..3 {
        let p = GenParams { seed, temperature: 1.0, top_k: Some(40), top_p: Some(0.95), max_new_tokens: 48, ..GenParams::default() };
        print!("seed {seed}: ");
        let g = infer::generate_stream(model, tok, &prompt, &p, |chunk| {
            print!("{chunk}");
            std::io::stdout().flush().ok();
        })?;
        println!("  [{} tokens]", g.completion_tokens);
    }

    let logits = [2.0f32, 1.0, 0.5, -1.0];
    let seen = BTreeSet::from([0u32]);
    let plain = GenParams { temperature: 1.0, top_k: None, top_p: None, ..GenParams::default() };
    for rho in [1.0, 1.3, 2.0] {
        let mut l = logits.to_vec();
        penalize(&mut l, &seen, rho);
        let p: Vec<String> = candidates(&l, &plain).iter().map(|(id, q)| format!("{id}:{q:.3}")).collect();
        println!("penalty {rho}: {}", p.join(" "));
    }
    Ok(())
}
