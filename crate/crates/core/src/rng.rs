use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic random streams derived from one seed.
pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream ids. Each consumer of randomness owns one so that adding draws in
// one place never shifts another.
pub(crate) const ANCHOR_ROWS: u64 = 1;
pub(crate) const ANCHOR_EMBED: u64 = 2;
pub(crate) const DATA_MEANS: u64 = 3;
pub(crate) const DATA_SAMPLES: u64 = 4;
pub(crate) const DATA_SPLIT: u64 = 5;
pub(crate) const MODEL_INIT: u64 = 6;
pub(crate) const HEAD_INIT: u64 = 7;
pub(crate) const SHUFFLE: u64 = 8;
