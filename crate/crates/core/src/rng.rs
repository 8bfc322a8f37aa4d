//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream addressed by
//! `(seed, domain, index)`, so parallel work items get reproducible noise no
//! matter how they are scheduled.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream domains. Keep these distinct: two domains must never alias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum Domain {
    Init = 1,
    Pretrain = 2,
    Rollout = 3,
    Shuffle = 4,
    Eval = 5,
    Diversity = 6,
    Verify = 7,
    Baseline = 8,
    Misc = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Returns the stream for `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ ((domain as u64) << 48)));
    let id = splitmix64(splitmix64(a).wrapping_add(b.wrapping_mul(0xd6e8_feb8_6659_fd93)));
    rng.set_stream(id);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Uniform index in `0..n`; `n` must be positive.
pub fn index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
