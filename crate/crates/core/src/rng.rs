//! Seeded random streams. Stream `(seed, index)` is independent of how many
//! other streams were drawn, so parallel and serial runs agree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
