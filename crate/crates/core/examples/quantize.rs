//! Quantizes a random decoder two ways and prints the memory report, the
//! round-trip error and how far the logits move.

use tinylora::model::{forward, init_weights, ModelConfig, ModelRef};
use tinylora::quant::{self, BaseQuant, Scheme, DEFAULT_BLOCK_SIZE};

fn main() -> tinylora::Result<()> {
    let cfg = ModelConfig::toy(512);
    let dense = init_weights(&cfg, 3)?;
    let report = quant::memory_report(&dense, DEFAULT_BLOCK_SIZE);
    println!("{report}");

    let ids: Vec<u32> = (0..24).map(|i| (i * 37 % 512) as u32).collect();
    let reference = forward(ModelRef::new(&cfg, &dense), &ids, None)?;
    for (scheme, label) in [(Scheme::Int8Absmax, BaseQuant::Int8), (Scheme::Nf4, BaseQuant::Nf4)] {
        let q = quant::quantize_weights(&dense, scheme, DEFAULT_BLOCK_SIZE)?;
        let back = quant::dequantize_weights(&q);
        let weight_err = dense
            .iter()
            .zip(back.iter())
            .filter_map(|((_, a), (_, b))| Some(a.as_dense()?.max_abs_diff(b.as_dense()?)))
            .fold(0f32, f32::max);
        let logits = forward(ModelRef::new(&cfg, &q), &ids, None)?;
        println!(
            "{label:?}: x{:.2} smaller, max weight error {weight_err:.2e}, max logit shift {:.2e}",
            report.compression_ratio(label),
            reference.max_abs_diff(&logits)
        );
    }
    Ok(())
}
