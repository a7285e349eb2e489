//! Seeded inputs shared by the benchmarks.

use freqdeno::{DenoConfig, DenoModule, ModalityParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Feature-map sizes benchmarked, `(C, H, W)`.
pub const SIZES: [(usize, usize, usize); 3] = [(4, 16, 16), (8, 32, 32), (16, 64, 64)];

pub fn feature_map(c: usize, h: usize, w: usize) -> Tensor {
    Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1))
}

pub fn plane(h: usize, w: usize) -> Tensor {
    Tensor::uniform(&[h, w], 0.0, 2.0, &mut ChaCha8Rng::seed_from_u64(2))
}

pub fn modality(tokens: usize) -> ModalityParams {
    ModalityParams::init(tokens, &mut ChaCha8Rng::seed_from_u64(3))
}

pub fn module(config: DenoConfig) -> DenoModule {
    DenoModule::seeded(config, &mut ChaCha8Rng::seed_from_u64(4)).expect("valid config")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_seeded() {
        assert!(feature_map(2, 8, 8).bit_eq(&feature_map(2, 8, 8)));
        let m = module(DenoConfig::default());
        let (c, h, w) = SIZES[1];
        assert_eq!(m.forward(&feature_map(c, h, w)).unwrap().output.shape(), [c, h, w]);
    }
}
