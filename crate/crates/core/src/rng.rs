//! Named, independent random streams derived from one master seed.
//!
//! Each stream is a ChaCha8 block cipher keyed by the seed and selected by
//! its stream number, so drawing from one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamId {
    Init,
    Shuffle,
    Dropout,
    Xi,
}

impl StreamId {
    pub const ALL: [StreamId; 4] = [StreamId::Init, StreamId::Shuffle, StreamId::Dropout, StreamId::Xi];

    fn index(self) -> usize {
        match self {
            StreamId::Init => 0,
            StreamId::Shuffle => 1,
            StreamId::Dropout => 2,
            StreamId::Xi => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamId::Init => "init",
            StreamId::Shuffle => "shuffle",
            StreamId::Dropout => "dropout",
            StreamId::Xi => "xi",
        }
    }
}

/// Build a generator for `(seed, stream)`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug)]
pub struct Streams {
    seed: u64,
    rngs: [ChaCha8Rng; 4],
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rngs: StreamId::ALL.map(|id| substream(seed, id.index() as u64 + 1)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&mut self, id: StreamId) -> &mut ChaCha8Rng {
        &mut self.rngs[id.index()]
    }

    /// Number of 32-bit words consumed so far; used to audit which code paths
    /// touch which stream.
    pub fn position(&self, id: StreamId) -> u128 {
        self.rngs[id.index()].get_word_pos()
    }
}
