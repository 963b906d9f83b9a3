//! Seeded, splittable random streams.
//!
//! Every random draw in the pipeline comes from a named stream keyed by
//! `(seed, name, index)`. Streams are ChaCha8 instances: the 256-bit key is
//! expanded from the run seed with SplitMix64 and the 64-bit ChaCha stream id
//! is derived from the stream name and index. Two streams never share
//! keystream, so data order, crops, masks and initialization are independent,
//! and a stream for step `t` can be recreated without replaying steps `< t`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Generator handed to every sampling routine.
pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed }
    }

    /// Independent stream for `(name, index)`.
    pub fn stream(&self, name: &str, index: u64) -> StreamRng {
        let mut sm = self.seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut sm).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut mix = fnv1a(name) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        rng.set_stream(splitmix64(&mut mix));
        rng
    }
}
