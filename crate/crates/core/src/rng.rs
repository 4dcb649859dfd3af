//! Named, independent random streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifies one of the per-run random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Env = 0,
    Lower = 1,
    Higher = 2,
    Preference = 3,
    Eval = 4,
    Init = 5,
}

/// Build the generator for `stream` of a run seeded with `seed`.
///
/// Every stream shares the seed but uses a distinct ChaCha stream id, so
/// consuming randomness in one never shifts another.
pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// All streams of one run.
#[derive(Debug, Clone)]
pub struct RunRng {
    pub env: ChaCha8Rng,
    pub lower: ChaCha8Rng,
    pub higher: ChaCha8Rng,
    pub preference: ChaCha8Rng,
    pub eval: ChaCha8Rng,
    pub init: ChaCha8Rng,
}

impl RunRng {
    pub fn new(seed: u64) -> Self {
        Self {
            env: stream(seed, Stream::Env),
            lower: stream(seed, Stream::Lower),
            higher: stream(seed, Stream::Higher),
            preference: stream(seed, Stream::Preference),
            eval: stream(seed, Stream::Eval),
            init: stream(seed, Stream::Init),
        }
    }
}
