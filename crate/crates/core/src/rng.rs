//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, so adding or removing draws in one component never shifts the
//! numbers another component sees.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Array;

pub type Rng = ChaCha8Rng;

/// Named stream identifiers.
pub mod stream {
    pub const INIT_GENERATOR: u64 = 1;
    pub const INIT_ENCODER: u64 = 2;
    pub const INIT_CRITIC: u64 = 3;
    pub const INIT_PROTONET: u64 = 4;
    pub const EPISODES: u64 = 10;
    pub const BACKBONE_NOISE: u64 = 11;
    pub const FSL_NOISE: u64 = 12;
    pub const PRETRAIN: u64 = 13;
    pub const FINETUNE: u64 = 14;
    pub const TEST_SUPPORT: u64 = 20;
    pub const LINEAR_HEAD: u64 = 21;
    pub const REAL_SUPPORT: u64 = 22;
    pub const TOY: u64 = 30;
}

pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal(rng: &mut Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Array::from_vec(shape.to_vec(), data).expect("element count matches shape")
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Array::from_vec(shape.to_vec(), data).expect("element count matches shape")
}
