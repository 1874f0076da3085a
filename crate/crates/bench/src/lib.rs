//! Shared fixtures for the criterion benches: a deterministic toy model,
//! a subnet genome at the default budget, and synthetic Gram matrices.

use rand::Rng;
use whittle_core::genome::SearchSpace;
use whittle_core::model::init_weights;
use whittle_core::search::random_genome;
use whittle_core::util::derive_rng;
use whittle_core::{Genome, Matrix, ModelConfig, ModelWeights};

pub const TARGET_RATIO: f64 = 0.8;

pub fn toy_model() -> (ModelConfig, ModelWeights) {
    let config = ModelConfig::toy();
    let weights = init_weights(&config, 42);
    (config, weights)
}

pub fn toy_space(config: &ModelConfig) -> SearchSpace {
    SearchSpace::toy_default(config, TARGET_RATIO)
}

pub fn toy_genome(config: &ModelConfig) -> Genome {
    random_genome(config, &toy_space(config), 4242)
}

/// Token windows cycling through the byte vocabulary.
pub fn eval_windows(count: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..count).map(|w| (0..len).map(|i| ((w * 31 + i * 7 + 3) % vocab) as u32).collect()).collect()
}

/// Positive-definite Gram built as `X^T X / k` plus a small ridge.
pub fn synthetic_gram(n: usize, samples: usize, seed: u64) -> Matrix {
    let mut rng = derive_rng(seed, &["bench-gram"]);
    let x: Vec<f64> = (0..samples * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = Matrix::zeros(n, n);
    for row in x.chunks(n) {
        for i in 0..n {
            for j in 0..n {
                g.set(i, j, g.get(i, j) + row[i] * row[j]);
            }
        }
    }
    let scale = 1.0 / samples as f64;
    for i in 0..n {
        for j in 0..n {
            g.set(i, j, g.get(i, j) * scale);
        }
    }
    for i in 0..n {
        g.set(i, i, g.get(i, i) + 1e-3);
    }
    g
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = derive_rng(seed, &["bench-weights"]);
    let data = (0..rows * cols).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Prune every fifth column, matching the default budget roughly.
pub fn stride_mask(n: usize) -> Vec<bool> {
    (0..n).map(|i| i % 5 == 4).collect()
}
