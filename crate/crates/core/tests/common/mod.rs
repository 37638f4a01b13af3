#![allow(dead_code)]

use knnfuse::memory::{ExternalMemory, MemoryRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gauss(rng: &mut impl Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

/// Gaussian mixture: `n` records plus `n_queries` held-out queries drawn
/// from the same mixture. Values are the record's cluster index.
pub fn clustered(n: usize, n_queries: usize, d: usize, n_clusters: usize, sigma: f64, seed: u64) -> (ExternalMemory, Vec<Vec<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..n_clusters).map(|_| (0..d).map(|_| gauss(&mut rng)).collect()).collect();
    let mut mem = ExternalMemory::new(d, 1).unwrap();
    let mut queries = Vec::with_capacity(n_queries);
    for i in 0..n + n_queries {
        let c = rng.random_range(0..n_clusters);
        let v: Vec<f32> = centers[c].iter().map(|x| (x + sigma * gauss(&mut rng)) as f32).collect();
        if i < n {
            mem.append(MemoryRecord::new(i as u64, v, vec![c as f32], i as u64)).unwrap();
        } else {
            queries.push(v);
        }
    }
    (mem, queries)
}

/// Store with shuffled, gappy ids. When `lattice` is set keys are small
/// integers, so exact distance ties are common.
pub fn random_store(n: usize, d: usize, lattice: bool, rng: &mut impl Rng) -> ExternalMemory {
    let mut mem = ExternalMemory::new(d, 2).unwrap();
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + rng.random_range(0..3)).collect();
    use rand::seq::SliceRandom;
    ids.shuffle(rng);
    for id in ids {
        let key: Vec<f32> = (0..d)
            .map(|_| if lattice { rng.random_range(-2i32..=2) as f32 } else { gauss(rng) as f32 })
            .collect();
        mem.append(MemoryRecord::new(id, key, vec![id as f32, 1.0], id)).unwrap();
    }
    mem
}

pub fn random_query(d: usize, lattice: bool, rng: &mut impl Rng) -> Vec<f32> {
    (0..d)
        .map(|_| if lattice { rng.random_range(-2i32..=2) as f32 } else { gauss(rng) as f32 })
        .collect()
}
