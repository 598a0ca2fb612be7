//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha stream derived from the run seed,
//! so adding draws in one place never shifts another consumer's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_GEOMETRY: u64 = 1;
pub const STREAM_TRAIN_DATA: u64 = 2;
pub const STREAM_TEST_DATA: u64 = 3;
pub const STREAM_ENCODER_INIT: u64 = 10;
pub const STREAM_HEAD_INIT: u64 = 11;
pub const STREAM_PRETRAIN: u64 = 12;
pub const STREAM_MIL_INIT: u64 = 20;
pub const STREAM_MIL_TRAIN: u64 = 21;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
