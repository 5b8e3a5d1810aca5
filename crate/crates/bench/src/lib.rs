//! Fixtures shared by the kernel benchmarks.

pub use capsnet_core::{CapsNetConfig, InitScheme, LossConfig, Network, Tensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` tensor, reproducible per seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// The reduced-width model used by the scaled end-to-end experiment.
pub fn scaled_network(num_classes: usize) -> Network {
    let config = CapsNetConfig {
        conv1_filters: 16,
        conv2_filters: 32,
        num_classes,
        class_dim: 16,
        ..CapsNetConfig::default()
    };
    Network::new(config, vec![512, 1024], InitScheme::default(), 0).expect("valid config")
}
