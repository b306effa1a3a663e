//! Named random sub-streams derived from a single top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream identifiers. Adding a stream never perturbs existing ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Train = 2,
    Attack = 3,
    Data = 4,
    Pairs = 5,
    /// Inner attacks of adversarial training.
    AdvTrain = 6,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Per-item generator inside a stream, e.g. one per attacked example.
pub fn substream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(((which as u64) << 48) ^ index);
    rng
}
