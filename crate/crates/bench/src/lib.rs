//! Shared fixtures for the benchmarks in `benches/`.

use acal_core::data::{DataConfig, DomainPair, GlyphPairConfig};
use acal_core::objectives::{VariantName, VariantSpec};
use acal_core::trainer::{init_source_model, init_state, TrainConfig, TrainState};
use acal_core::Tensor;

/// Deterministic pseudo-random tensor; values in `[-1, 1)`.
pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::new(shape, data).expect("finite")
}

/// A small glyph pair and a fresh training state for `variant`. The source
/// model is left untrained: step cost does not depend on its weights.
pub fn step_fixture(variant: VariantName, batch_size: usize) -> (TrainConfig, DomainPair, TrainState) {
    let cfg = TrainConfig {
        variant: VariantSpec::new(variant),
        batch_size,
        check_isolation: false,
        ..TrainConfig::default()
    };
    let data = DataConfig::Glyph(GlyphPairConfig {
        source_per_class: 20,
        target_pool_per_class: 10,
        eval_per_class: 2,
        ..GlyphPairConfig::default()
    });
    let pair = data.build(0, 1.0).expect("fixture data");
    let m_s = init_source_model(0, pair.source_train.image_shape(), 10).expect("source model");
    let state = init_state(&cfg, &pair, &m_s).expect("state");
    (cfg, pair, state)
}
