//! Purpose-split random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent purposes drawing randomness. Each gets its own ChaCha stream
/// so toggling one consumer never shifts the draws of another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Sampling = 2,
    Noise = 3,
    Graph = 4,
    Task = 5,
    Eval = 6,
    Pool = 7,
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
