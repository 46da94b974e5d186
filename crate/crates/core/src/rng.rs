//! Seeded random streams.
//!
//! Every run derives independent ChaCha streams from one `u64` seed, so the
//! source trajectory does not depend on how many draws a policy consumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RandomSource = ChaCha8Rng;

/// Stream carrying the source's state transitions.
pub const SOURCE_STREAM: u64 = 0;
/// Stream carrying randomized policy decisions.
pub const POLICY_STREAM: u64 = 1;
/// Stream used for network initialization and exploration.
pub const TRAINING_STREAM: u64 = 2;

pub fn seeded(seed: u64, stream: u64) -> RandomSource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
