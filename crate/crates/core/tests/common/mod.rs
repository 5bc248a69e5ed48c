#![allow(dead_code)]

pub mod oracle;
pub mod props;

use dfbscan::FinalLayerParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Gaussian layer with per-row offsets so class statistics differ.
pub fn random_layer(k: usize, d: usize, seed: u64) -> FinalLayerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f32, 1.0).unwrap();
    let mut weights = Vec::with_capacity(k * d);
    for _ in 0..k {
        let offset: f32 = rng.random_range(-0.2..0.2);
        let scale: f32 = rng.random_range(0.05..1.0);
        weights.extend((0..d).map(|_| offset + scale * unit.sample(&mut rng)));
    }
    let bias = (0..k).map(|_| unit.sample(&mut rng)).collect();
    FinalLayerParams::new(k, d, weights, bias).unwrap()
}
