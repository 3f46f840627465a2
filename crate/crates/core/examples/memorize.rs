//! Fine-tunes an adapter until the base answers sixteen fixed instructions
//! word for word, then prints each greedy answer.
//!
//! The first run pretrains the toy base and caches it under the system temp
//! directory; later runs reuse it.

use std::time::Instant;

use tinylora::data::render_instruction_prompt;
use tinylora::infer::{self, GenParams};
use tinylora::model::ModelRef;
use tinylora::synth::{self, BaseRecipe};
use tinylora::train::{evaluate, Trainer};

fn main() -> tinylora::Result<()> {
    let cache = std::env::temp_dir().join("tinylora-cache");
    let started = Instant::now();
    let base = synth::pretrained_base(&BaseRecipe::default(), Some(&cache))?;
    println!("base ready after {:.1?}", started.elapsed());

    let pairs = synth::overfit_pairs();
    let samples = synth::encode_pairs(&pairs, &base.tokenizer, 256)?;
    let tcfg = synth::fixture_train_config();
    let mut trainer = Trainer::new(&base.cfg, &base.weights, samples.clone(), &tcfg, &synth::fixture_lora_config())?;
    let t = Instant::now();
    while !trainer.is_done() {
        trainer.run_steps(250)?;
        let model = ModelRef::new(&base.cfg, trainer.base()).with_adapter(Some(trainer.adapter()));
        println!("step {:>5}  eval loss {:.4}", trainer.step_count(), evaluate(model, &samples)?.mean_loss);
    }
    println!("trained in {:.1?}", t.elapsed());

    let model = ModelRef::new(&base.cfg, trainer.base()).with_adapter(Some(trainer.adapter()));
    let mut exact = 0;
    for p in &pairs {
        let g = infer::generate(model, &base.tokenizer, &render_instruction_prompt(p, "default")?, &GenParams::greedy(64))?;
        exact += usize::from(g.text == p.output);
        println!("{} -> {}", p.instruction, g.text);
    }
    println!("{exact}/{} verbatim", pairs.len());
    Ok(())
}
