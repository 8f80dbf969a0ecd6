//! Seeded parameter initialization.
//!
//! Every parameter draws from its own stream, seeded from `(global seed,
//! parameter name)`, so adding or reordering parameters never perturbs the
//! values of the others. Values are drawn in `f64` and then cast, which keeps
//! `f32` and `f64` instances of the same model numerically aligned.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::Scalar;

/// Standard deviation of linear-weight initialization.
pub const WEIGHT_STD: f64 = 0.02;

/// FNV-1a over the name, mixed with the global seed through SplitMix64.
pub fn param_seed(global: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in name.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h ^ splitmix64(global))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(global: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(param_seed(global, name))
}

pub fn normal<T: Scalar>(global: u64, name: &str, len: usize, std: f64) -> Vec<T> {
    let mut rng = rng_for(global, name);
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_depend_on_name_and_seed() {
        let a: Vec<f64> = normal(1, "layer.0.attn.q.weight", 8, WEIGHT_STD);
        let b: Vec<f64> = normal(1, "layer.0.attn.q.weight", 8, WEIGHT_STD);
        let c: Vec<f64> = normal(1, "layer.0.attn.k.weight", 8, WEIGHT_STD);
        let d: Vec<f64> = normal(2, "layer.0.attn.q.weight", 8, WEIGHT_STD);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn f32_values_are_rounded_f64_values() {
        let wide: Vec<f64> = normal(7, "x", 16, 1.0);
        let narrow: Vec<f32> = normal(7, "x", 16, 1.0);
        for (w, n) in wide.iter().zip(&narrow) {
            assert_eq!(*w as f32, *n);
        }
    }
}
