#![allow(dead_code)]

use lidarflow::lidar::{GridSpec, RangeImage};
use lidarflow::network::{Network, NetworkConfig};
use lidarflow::synth::{generate_sample, SceneConfig};
use lidarflow::training::TrainSample;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn desk_net() -> Network {
    Network::new(NetworkConfig::desk()).unwrap()
}

/// Random returns in [2, 40) m with about a fifth of the cells empty.
pub fn random_range_image(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> RangeImage {
    let mut img = RangeImage::empty(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            if rng.random_bool(0.8) {
                img.set(r, c, Some((rng.random_range(2.0..40.0), rng.random_range(0.0..1.0))));
            }
        }
    }
    img
}

pub fn synth_sample(net: &Network, seed: u64) -> TrainSample {
    let cfg = SceneConfig::new(GridSpec::desk(), seed);
    generate_sample(&cfg).unwrap().to_train_sample(net).unwrap()
}
