#![allow(dead_code)]

pub mod equiv;
pub mod grad;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

use xvector::model::{ModelConfig, PoolingKind};
use xvector::nn::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn tiny_config(pooling: PoolingKind, key_layer: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        key_layer,
        heads,
        ..ModelConfig::tiny(3, pooling)
    }
}

/// Packed batch of `lens.len()` random utterances with labels cycling
/// through `k` classes.
pub fn packed_batch(
    rng: &mut ChaCha8Rng,
    lens: &[usize],
    dim: usize,
    k: usize,
) -> (Matrix, Vec<Range<usize>>, Vec<usize>) {
    let parts: Vec<Matrix> = lens.iter().map(|&t| random_matrix(rng, t, dim)).collect();
    let refs: Vec<&Matrix> = parts.iter().collect();
    let (x, segs) = Matrix::stack(&refs).unwrap();
    let labels = (0..lens.len()).map(|i| i % k).collect();
    (x, segs, labels)
}
