//! Seeded, platform-stable random streams.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Independent ChaCha stream `stream` under `seed`.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used across the crate, kept in one place so they never collide.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const VIEWS: u64 = 3;
    pub const WATERMARK: u64 = 4;
    pub const PREDICTOR_INIT: u64 = 5;
    pub const TRAIN_DATA: u64 = 10;
    pub const TEST_DATA: u64 = 11;
    pub const POOL: u64 = 12;
    pub const NOISE: u64 = 20;
    pub const PROBE: u64 = 30;
    pub const ATTACK: u64 = 40;
    pub const HEAD_INIT: u64 = 41;
    pub const EVAL: u64 = 50;
}
