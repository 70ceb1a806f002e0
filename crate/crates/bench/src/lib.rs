//! Shared fixtures for the benchmarks.

use pearl_core::model::ModelConfig;
use pearl_core::synthworld::{gen_example, Difficulty, Regime, TrajectoryExample};
use pearl_core::Tensor;

/// Deterministic pseudo-random tensor; no RNG crate needed for fixtures.
pub fn filled(rows: usize, cols: usize, salt: u64) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| {
            let x = (i as u64 ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 11;
            x as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    Tensor::from_vec(vec![rows, cols], data).expect("rows * cols elements")
}

pub fn examples(n: usize, regime: Regime) -> Vec<TrajectoryExample> {
    (0..n as u64).map(|i| gen_example(3, regime, Difficulty::EASY, 0, i).expect("generator")).collect()
}

/// The size used for the desk-scale training runs.
pub fn bench_model() -> ModelConfig {
    ModelConfig::default()
}
