//! Trains an adapter on lookup task A, continues it on task B, and compares
//! how much of A survives against an adapter trained on B from scratch.
//!
//! cargo run --release -p tinylora --example continued_finetune

use std::time::Instant;

use tinylora::model::ModelRef;
use tinylora::synth::{self, BaseRecipe};
use tinylora::train::{self, evaluate, TrainConfig};

fn steps_from_env(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> tinylora::Result<()> {
    let started = Instant::now();
    let cache = std::env::temp_dir().join("tinylora-cache");
    let base = synth::pretrained_base(&BaseRecipe::default(), Some(&cache))?;
    println!("base ready after {:.1?}", started.elapsed());

    let a = synth::encode_pairs(&synth::task_a(), &base.tokenizer, 256)?;
    let b = synth::encode_pairs(&synth::task_b(), &base.tokenizer, 256)?;
    let tcfg = TrainConfig {
        max_steps: Some(steps_from_env("STEPS", 300)),
        ..synth::fixture_train_config()
    };
    let lcfg = synth::fixture_lora_config();

    let on_a = train::train(&base.cfg, &base.weights, a.clone(), &tcfg, &lcfg, |_| Ok(()))?;
    let continued = train::continue_finetune(&base.cfg, &base.weights, &on_a, b.clone(), &tcfg, |_| Ok(()))?;
    let scratch = train::train(&base.cfg, &base.weights, b.clone(), &tcfg, &lcfg, |_| Ok(()))?;

    let loss = |ckpt: &train::Checkpoint, data| {
        evaluate(ModelRef::new(&base.cfg, &base.weights).with_adapter(Some(&ckpt.adapter)), data).map(|r| r.mean_loss)
    };
    println!("{:<22} {:>10} {:>10}", "adapter", "loss on A", "loss on B");
    for (name, ckpt) in [("A only", &on_a), ("A then B", &continued), ("B from scratch", &scratch)] {
        println!("{name:<22} {:>10.4} {:>10.4}", loss(ckpt, &a)?, loss(ckpt, &b)?);
    }
    println!("provenance of the continued run: {:?}", continued.provenance);
    println!("total {:.1?}", started.elapsed());
    Ok(())
}
