#![allow(dead_code)]

use ndarray::{ArrayD, IxDyn};
use pathogan::model::{ArchConfig, ModelConfig};
use pathogan_autograd::{Scalar, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-channel 8x8 model small enough for finite differences.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_channels: 2,
        image_size: 8,
        z: 3,
        arch: ArchConfig {
            encoder: "c3-3,d4,C1-2,Q2F,l(z*i)t,l(2*z)".into(),
            decoder: "l(i*i)e,F2Q,c3-2,u3,C3-r".into(),
            zb: "c3-3,d4,R4,u3,C3-r".into(),
            discriminator: "P4-2,p4-3,C4-1".into(),
        },
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `(n, C, S, S)` batch with values in `[-0.9, 0.9]`.
pub fn batch<T: Scalar>(n: usize, config: &ModelConfig, seed: u64) -> ArrayD<T> {
    let mut r = rng(seed);
    let s = config.image_size;
    ArrayD::from_shape_fn(IxDyn(&[n, config.n_channels, s, s]), |_| {
        T::from_f64_lossy(r.gen_range(-0.9..0.9))
    })
}

pub fn constant<T: Scalar>(a: ArrayD<T>) -> Var<T> {
    Var::constant(a)
}
