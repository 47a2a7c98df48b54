//! Seeded parameter streams.
//!
//! Every tensor draws from its own ChaCha8 stream keyed by `(seed, stream id)`.
//! ChaCha is counter based, so a tensor's values do not depend on how many
//! other tensors were drawn before it, and the byte stream is identical on
//! every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// `n` values uniform in `[-scale, scale)`.
pub fn uniform_vec(seed: u64, stream_id: u64, n: usize, scale: f32) -> Vec<f32> {
    let mut rng = stream(seed, stream_id);
    (0..n)
        .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * scale)
        .collect()
}
