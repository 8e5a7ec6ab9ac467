//! Named random substreams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Rollout = 2,
    PolicyInit = 3,
    Shuffle = 4,
    Dropout = 5,
}

/// Independent generator for `stream`; the same `(master, stream)` pair
/// always yields the same sequence.
pub fn substream(master: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream as u64);
    rng
}
