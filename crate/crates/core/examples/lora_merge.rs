//! Attaches an adapter, perturbs it, then folds it into the base weights and
//! checks that both paths produce the same logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinylora::lora::{self, LoraConfig};
use tinylora::model::{forward, init_weights, ModelConfig, ModelRef};

fn main() -> tinylora::Result<()> {
    let cfg = ModelConfig::toy(128);
    let base = init_weights(&cfg, 1)?;
    let lcfg = LoraConfig {
        target_modules: ["q_proj", "k_proj", "v_proj", "o_proj"].map(String::from).into(),
        ..LoraConfig::default()
    };
    let mut scratch = base.clone();
    let mut adapter = lora::attach(&mut scratch, &lcfg, 2)?;
    println!("{} adapter parameters over {} modules, scaling {}", adapter.num_params(), adapter.modules().count(), lcfg.scaling());

    let ids: Vec<u32> = (0..16).map(|i| (i * 11 % 128) as u32).collect();
    let plain = forward(ModelRef::new(&cfg, &base), &ids, None)?;
    let fresh = forward(ModelRef::new(&cfg, &base).with_adapter(Some(&adapter)), &ids, None)?;
    println!("fresh adapter changes logits by {:e}", plain.max_abs_diff(&fresh));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (_, t) in adapter.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    let composed = forward(ModelRef::new(&cfg, &base).with_adapter(Some(&adapter)), &ids, None)?;
    let merged = lora::merge(&base, &adapter, false)?;
    let folded = forward(ModelRef::new(&cfg, &merged), &ids, None)?;
    println!("trained adapter moves logits by {:.3e}", plain.max_abs_diff(&composed));
    println!("merged base vs adapter path: {:.3e}", composed.max_abs_diff(&folded));
    println!("adapter refused on the merged base: {}", adapter.check_base(&merged).is_err());
    Ok(())
}
