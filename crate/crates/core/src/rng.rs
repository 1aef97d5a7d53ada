//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a hash of a base seed and a path of indices, so a stream never
//! depends on how many draws some other stream consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(seed, path...)`.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, path))
}

// Stream labels, kept distinct so unrelated consumers never share a stream.
pub const LABEL_MOTIFS: u64 = 1;
pub const LABEL_TEXT_TABLE: u64 = 2;
pub const LABEL_INIT: u64 = 3;
pub const LABEL_MODE: u64 = 4;
pub const LABEL_BATCH: u64 = 5;
pub const LABEL_SAMPLE: u64 = 6;
pub const LABEL_DROPOUT: u64 = 7;
pub const LABEL_EVAL: u64 = 8;
pub const LABEL_PROJECTION: u64 = 9;
pub const LABEL_PROMPT: u64 = 10;
pub const LABEL_REFERENCE: u64 = 11;

pub fn normal(rng: &mut Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal(rng, std)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
