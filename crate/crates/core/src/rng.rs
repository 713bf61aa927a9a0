//! Seeded randomness. Every random draw in the crate comes from an explicit
//! [`SeededRng`] handle; there is no global generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for one item (a POI, a run, a grid point) derived from
/// a base seed. Draw order inside one stream does not affect other streams.
pub fn stream(seed: u64, stream_id: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}
