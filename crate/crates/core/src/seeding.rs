//! Independent random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Backbone = 1,
    Tasks = 2,
    ClientShift = 3,
    Samples = 4,
    Split = 5,
    Batches = 6,
    Init = 7,
    CrossInit = 8,
}

/// Stream for `(seed, purpose, index)`; distinct triples never share output.
pub fn rng(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((purpose as u64) << 40) | index);
    r
}
