//! Named, seedable random streams.
//!
//! Each concern (data generation, initialisation, shuffling, masking, ...)
//! draws from its own ChaCha stream derived from one run seed, so changing
//! how much randomness one component consumes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    Masking = 4,
    Dropout = 5,
    Eval = 6,
    Acm = 7,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, s: Stream) -> Rng {
        self.substream(s, 0)
    }

    /// Independent generator for `(stream, index)`, e.g. one per epoch.
    pub fn substream(&self, s: Stream, index: u64) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((s as u64) << 48) | (index & ((1 << 48) - 1)));
        rng
    }
}
