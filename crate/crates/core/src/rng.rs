//! Seed fan-out: one global seed, independent numbered substreams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for substream `stream` of `seed`. Streams never overlap, so
/// results do not depend on how work is split across workers.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent child seed.
pub fn child_seed(seed: u64, label: u64) -> u64 {
    use rand::RngCore;
    substream(seed, label).next_u64()
}
