use tinylora::data::{encode_sample, EncodedSample, Tokenizer};
use tinylora::lora::LoraConfig;
use tinylora::model::{init_weights, ModelConfig, ModelRef, ModelWeights};
use tinylora::quant::BaseQuant;
use tinylora::train::{self, evaluate, load_checkpoint, save_checkpoint, TrainConfig, Trainer};

const NOUNS: [&str; 10] = ["cat", "dog", "tea", "moon", "rice", "boat", "lamp", "bird", "road", "fish"];
const COLORS: [&str; 4] = ["red", "blue", "green", "gold"];

fn setup() -> (ModelConfig, ModelWeights, Vec<EncodedSample>) {
    let tok = Tokenizer::bytes_only();
    let cfg = ModelConfig { max_seq_len: 32, ..ModelConfig::toy(tok.vocab_size()) };
    let w = init_weights(&cfg, 17).unwrap();
    let samples = NOUNS
        .iter()
        .enumerate()
        .map(|(i, n)| encode_sample(&format!("{n}?"), COLORS[i % 4], &tok, 32).unwrap())
        .collect();
    (cfg, w, samples)
}

fn tcfg(quant: BaseQuant) -> TrainConfig {
    TrainConfig {
        effective_batch: 4,
        micro_batch: 2,
        lr: 1e-2,
        warmup_steps: 5,
        seed: 11,
        quant_scheme: quant,
        quant_block_size: 32,
        max_steps: Some(100),
        ..TrainConfig::default()
    }
}

fn lcfg() -> LoraConfig {
    LoraConfig { r: 4, ..LoraConfig::default() }
}

#[test]
fn resumed_run_is_bitwise_identical() {
    let (cfg, w, samples) = setup();
    let t = tcfg(BaseQuant::Int8);
    let straight = train::train(&cfg, &w, samples.clone(), &t, &lcfg(), |_| Ok(())).unwrap();

    let mut first = Trainer::new(&cfg, &w, samples.clone(), &t, &lcfg()).unwrap();
    first.run_steps(50).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), first.checkpoint()).unwrap();
    drop(first);
    let ckpt = load_checkpoint(dir.path()).unwrap();
    let mut second = Trainer::resume(&cfg, &w, samples, &t, ckpt).unwrap();
    second.run(|_| Ok(())).unwrap();
    let resumed = second.into_checkpoint();

    assert_eq!(resumed.step, 100);
    assert_eq!(resumed.adapter, straight.adapter);
    assert_eq!(resumed.optimizer, straight.optimizer);
    assert_eq!(resumed.loss_history, straight.loss_history);
    assert_eq!(resumed.run_id, straight.run_id);
}

#[test]
fn micro_batch_split_does_not_change_updates() {
    let (cfg, w, samples) = setup();
    let run = |micro: usize| {
        let t = TrainConfig { micro_batch: micro, max_steps: Some(10), ..tcfg(BaseQuant::None) };
        train::train(&cfg, &w, samples.clone(), &t, &lcfg(), |_| Ok(())).unwrap()
    };
    let one = run(1);
    let four = run(4);
    let mut worst = 0f32;
    for ((n1, a), (n4, b)) in one.adapter.tensors().zip(four.adapter.tensors()) {
        assert_eq!(n1, n4);
        worst = worst.max(a.max_abs_diff(b));
    }
    assert!(worst < 1e-5, "{worst}");
    for ((_, l1), (_, l4)) in one.loss_history.iter().zip(&four.loss_history) {
        assert!((l1 - l4).abs() < 1e-5);
    }
}

#[test]
fn same_seed_same_adapter_and_different_seed_differs() {
    let (cfg, w, samples) = setup();
    let t = TrainConfig { max_steps: Some(20), ..tcfg(BaseQuant::Nf4) };
    let a = train::train(&cfg, &w, samples.clone(), &t, &lcfg(), |_| Ok(())).unwrap();
    let b = train::train(&cfg, &w, samples.clone(), &t, &lcfg(), |_| Ok(())).unwrap();
    assert_eq!(a.adapter, b.adapter);
    let c = train::train(&cfg, &w, samples, &TrainConfig { seed: 12, ..t }, &lcfg(), |_| Ok(())).unwrap();
    assert_ne!(a.adapter.content_hash(), c.adapter.content_hash());
}

#[test]
fn quantized_base_stays_frozen_for_500_steps() {
    let (cfg, w, samples) = setup();
    for quant in [BaseQuant::Int8, BaseQuant::Nf4] {
        let t = TrainConfig { max_steps: Some(500), ..tcfg(quant) };
        let expected = train::prepare_base(&w, &t).unwrap().fingerprint();
        let mut trainer = Trainer::new(&cfg, &w, samples.clone(), &t, &lcfg()).unwrap();
        let start = trainer.adapter().content_hash();
        trainer.run(|_| Ok(())).unwrap();
        assert_eq!(trainer.base().fingerprint(), expected, "{quant:?}");
        assert_ne!(trainer.adapter().content_hash(), start);
        let ckpt = trainer.checkpoint();
        assert!(ckpt.loss_history.iter().all(|(_, l)| l.is_finite()));
        let first = ckpt.loss_history[0].1;
        assert!(ckpt.final_loss().unwrap() < first - 0.5, "{quant:?}: {first} -> {:?}", ckpt.final_loss());
    }
}

#[test]
fn training_lowers_eval_loss() {
    let (cfg, w, samples) = setup();
    let t = tcfg(BaseQuant::None);
    let mut trainer = Trainer::new(&cfg, &w, samples.clone(), &t, &lcfg()).unwrap();
    let before = evaluate(ModelRef::new(&cfg, trainer.base()).with_adapter(Some(trainer.adapter())), &samples)
        .unwrap()
        .mean_loss;
    trainer.run(|_| Ok(())).unwrap();
    let after = evaluate(ModelRef::new(&cfg, trainer.base()).with_adapter(Some(trainer.adapter())), &samples)
        .unwrap()
        .mean_loss;
    assert!(after < before - 0.5, "{before} -> {after}");
}

#[test]
fn checkpoints_are_emitted_periodically_and_at_the_end() {
    let (cfg, w, samples) = setup();
    let t = TrainConfig { save_every_steps: 7, max_steps: Some(20), effective_batch: 10, micro_batch: 5, ..tcfg(BaseQuant::None) };
    let mut seen = Vec::new();
    train::train(&cfg, &w, samples, &t, &lcfg(), |c| {
        seen.push(c.step);
        Ok(())
    })
    .unwrap();
    // every epoch is one step here, so each step is an epoch boundary
    assert_eq!(seen.first(), Some(&1));
    assert_eq!(seen.last(), Some(&20));
}

#[test]
fn continuing_on_nothing_changes_nothing() {
    let (cfg, w, samples) = setup();
    let t = TrainConfig { max_steps: Some(30), ..tcfg(BaseQuant::Int8) };
    let prior = train::train(&cfg, &w, samples, &t, &lcfg(), |_| Ok(())).unwrap();
    let cont = TrainConfig { max_steps: None, ..t };
    let next = train::continue_finetune(&cfg, &w, &prior, Vec::new(), &cont, |_| Ok(())).unwrap();
    assert_eq!(next.step, 0);
    assert_eq!(next.adapter, prior.adapter);
    assert_eq!(next.provenance.len(), prior.provenance.len() + 1);
    assert_eq!(next.provenance.last(), Some(&prior.run_id));
    assert_ne!(next.run_id, prior.run_id);
}

#[test]
fn continuing_against_another_base_is_refused() {
    let (cfg, w, samples) = setup();
    let t = TrainConfig { max_steps: Some(2), ..tcfg(BaseQuant::None) };
    let prior = train::train(&cfg, &w, samples.clone(), &t, &lcfg(), |_| Ok(())).unwrap();
    let other = init_weights(&cfg, 18).unwrap();
    assert!(matches!(
        train::continue_finetune(&cfg, &other, &prior, samples, &t, |_| Ok(())),
        Err(tinylora::Error::Provenance { .. })
    ));
}

#[test]
fn bad_batch_settings_are_config_errors() {
    let (cfg, w, samples) = setup();
    let t = TrainConfig { effective_batch: 6, micro_batch: 4, ..tcfg(BaseQuant::None) };
    assert!(matches!(Trainer::new(&cfg, &w, samples, &t, &lcfg()), Err(tinylora::Error::Config(_))));
}
