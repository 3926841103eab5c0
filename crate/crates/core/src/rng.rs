//! Purpose-tagged random streams derived from one run seed.
//!
//! Each (purpose, index) pair selects an independent ChaCha stream, so
//! e.g. the dropout masks of step 17 do not depend on how many distractors
//! were drawn, and a resumed run can re-derive any stream directly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Distractors = 2,
    Shuffle = 3,
    Dropout = 4,
    Sampling = 5,
    EvalDistractors = 6,
    Synthetic = 7,
}

const INDEX_BITS: u32 = 56;

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    assert!(index < 1 << INDEX_BITS, "stream index {index} too large");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << INDEX_BITS) | index);
    rng
}
