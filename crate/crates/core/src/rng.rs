//! Seeded, counter-based random streams.
//!
//! Every randomized routine takes a master seed and draws from a ChaCha
//! stream selected by a small integer, so independent workers (cameras,
//! keypoints, trials) never share generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type KvnRng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> KvnRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for a `(camera, keypoint)` pair plus a purpose tag.
pub fn stream_id(camera: usize, keypoint: usize, purpose: u64) -> u64 {
    ((camera as u64) << 40) ^ ((keypoint as u64) << 16) ^ purpose
}
