//! Named random sub-streams derived from one root seed.
//!
//! Every consumer of randomness draws from its own ChaCha stream, so toggling
//! one feature (say, MixUp) never shifts the draws seen by another (say,
//! dropout).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Split,
    Init,
    Augment,
    Dropout,
    Mixup,
    Batch,
    Synth,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Split => 1,
            Stream::Init => 2,
            Stream::Augment => 3,
            Stream::Dropout => 4,
            Stream::Mixup => 5,
            Stream::Batch => 6,
            Stream::Synth => 7,
        }
    }
}

pub fn stream(root_seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(which.id());
    rng
}
