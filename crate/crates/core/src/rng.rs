//! Counter-style random substreams derived from a master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream `index` of the generator seeded by `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
