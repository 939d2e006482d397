//! Seeded fixtures shared by the benchmarks.

use std::path::Path;

use memoattn_core::tensor::{softmax_rows, ApmRef, LayerWeights, Matrix};
use memoattn_core::{ApmStore, StoreConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One attention layer and an `l`-token input for it.
pub fn attention_layer(hidden: usize, heads: usize, l: usize, seed: u64) -> (LayerWeights, Matrix) {
    let mut r = rng(seed);
    let w = LayerWeights::random(hidden, hidden, heads, 1.5, &mut r).expect("valid layer shape");
    let x = Matrix::random_normal(l, hidden, 1.0, &mut r);
    (w, x)
}

/// A store of `n` single-head `l`×`l` records with ids `0..n`.
pub fn apm_store(dir: &Path, n: u64, l: usize, seed: u64) -> ApmStore {
    let mut store = ApmStore::create(dir, StoreConfig::default()).expect("store directory");
    let mut r = rng(seed);
    for id in 0..n {
        let apm = softmax_rows(&Matrix::random_normal(l, l, 2.0, &mut r));
        store
            .put(id, &[ApmRef::new(l, apm.data()).expect("square")])
            .expect("record fits");
    }
    store.flush().expect("flush");
    store
}

pub fn gaussian_vectors(n: usize, dim: usize, seed: u64) -> Vec<(u64, Vec<f32>)> {
    let mut r = rng(seed);
    (0..n as u64)
        .map(|i| (i, (0..dim).map(|_| StandardNormal.sample(&mut r)).collect()))
        .collect()
}
