//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every stochastic step (phantom parameters, corruption plans, dropout
//! masks, batch order) draws from a stream keyed by the master seed plus a
//! path of integers, so results do not depend on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a key path into a new 64-bit seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn stream(master: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

// Stream tags keep the key paths of unrelated consumers apart.
pub mod tag {
    pub const PHANTOM: u64 = 1;
    pub const CORRUPT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const SEVERITY: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const VALID: u64 = 8;
}
