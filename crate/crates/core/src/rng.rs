//! Seeded random streams.
//!
//! Every path owns its own ChaCha stream selected by `(seed, purpose, index)`,
//! so results do not depend on how rayon splits the work.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream families. Keeping them apart lets the G-Brownian driver
/// and the diffusion driver share a user seed without sharing numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    GbmDriver = 1,
    HuntDriver = 2,
    HuntInit = 3,
    Schedule = 4,
    Auxiliary = 5,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((purpose as u64) << 56));
    rng.set_stream(index);
    rng
}
