//! Seeded inputs shared by the kernel benchmarks.

use nope_core::attention::AttentionParams;
use nope_core::math::{gaussian_init, Matrix};
use nope_core::model::{ModelConfig, ModelParams, PeScheme};
use nope_core::train::{gen_order_task, Example};
use nope_core::SeededRng;

/// Attention weights with scale `1/sqrt(d)` and a standard normal `d x t` input.
pub fn attention_case(d: usize, t: usize, seed: u64) -> (AttentionParams, Matrix) {
    let mut rng = SeededRng::new(seed);
    let params = AttentionParams::random(&mut rng, d, 1.0 / (d as f64).sqrt()).expect("d > 0");
    let x = gaussian_init(&mut rng, d, t, 1.0).expect("positive scale");
    (params, x)
}

/// The experiment's model shape with `layers` layers, plus a batch from the
/// order task.
pub fn model_case(layers: usize, batch: usize) -> (ModelConfig, ModelParams, Vec<Example>) {
    let cfg = ModelConfig {
        n_layers: layers,
        d_model: 16,
        d_ff: 32,
        vocab_size: 8,
        max_len: 6,
        pe_scheme: PeScheme::None,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg).expect("valid config");
    let task = gen_order_task(8, 6, batch, 0).expect("valid task");
    (cfg, params, task.examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_have_requested_shapes() {
        let (p, x) = attention_case(8, 32, 1);
        assert_eq!((p.dim(), x.shape()), (8, (8, 32)));
        let (cfg, params, batch) = model_case(2, 32);
        params.check(&cfg).unwrap();
        assert_eq!(batch.len(), 32);
    }
}
