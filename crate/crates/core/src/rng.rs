//! Seeded initialization. Every parameter draws from its own stream keyed
//! by `(seed, path)`, so adding or removing a parameter never shifts the
//! values of the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes a label into a seed (splitmix64 finalizer over the FNV hash).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut z = seed ^ fnv1a(label.as_bytes());
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// `uniform(−1/√fan_in, 1/√fan_in)` for a `rows×cols` weight with `fan_in = cols`.
pub fn kaiming_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(rows, cols, data).expect("positive extents")
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(rows, cols, data).expect("positive extents")
}

/// Rows drawn from a standard normal and scaled to unit Euclidean norm.
pub fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = normal(rng, rows, cols, 1.0);
    for r in 0..rows {
        let norm = t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..cols {
            let v = t.get(r, c) / norm;
            t.set(r, c, v);
        }
    }
    t
}
