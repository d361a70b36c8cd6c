//! Seeded fixtures shared by the benchmarks.

use deaan::backend::EmbeddingSet;
use deaan::corpus::Domain;
use deaan::metrics::ScoreSet;
use deaan::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Gaussian target scores around 1, nontarget around -1.
pub fn score_set(n_target: usize, n_nontarget: usize, seed: u64) -> ScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |mu: f64, n: usize| -> Vec<f64> {
        let d = Normal::new(mu, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    };
    ScoreSet {
        target: draw(1.0, n_target),
        nontarget: draw(-1.0, n_nontarget),
    }
}

/// `classes` blobs of `per_class` points in `dim` dimensions.
pub fn embeddings(classes: usize, per_class: usize, dim: usize, seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| 2.0 * g()).collect()).collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, mu) in centers.iter().enumerate() {
        for _ in 0..per_class {
            rows.push(mu.iter().map(|m| m + g()).collect());
            labels.push(c);
        }
    }
    let n = rows.len();
    EmbeddingSet::new(rows, labels, (0..n).map(|i| format!("u{i}")).collect(), vec![Domain::Source; n]).unwrap()
}

/// A `[b, t, f]` batch of standard normal features.
pub fn feature_batch(b: usize, t: usize, f: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..b * t * f).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(vec![b, t, f], data).unwrap()
}
