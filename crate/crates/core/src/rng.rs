//! Every random draw derives from the run seed, a purpose tag and an index,
//! so any epoch can be replayed without carrying generator state around.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Split = 2,
    SearchEpoch = 3,
    TrainEpoch = 4,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Seed for helpers that take a plain `u64`.
pub fn derive_seed(seed: u64, purpose: Purpose) -> u64 {
    seed ^ (purpose as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}
