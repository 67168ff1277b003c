//! Reproducible per-replica random streams.
//!
//! All randomness in the crate flows through [`SeedSpec`]. A replica stream
//! is derived from a 64-bit master seed and a replica id with the SplitMix64
//! finalizer, which is a bijection on `u64`: distinct replica ids always give
//! distinct stream ids for a fixed master seed. The generator itself is
//! ChaCha8, so a given `(master_seed, replica_id)` pair produces the same
//! byte stream on every platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Golden-ratio increment used by SplitMix64.
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer (Steele, Lea, Flood 2014). Bijective on `u64`.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A fully derived replica stream: master seed plus a mixed stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

/// Derive the stream for `replica_id` from `master_seed`.
///
/// `stream_id = splitmix64(master_seed + (replica_id + 1) * GOLDEN_GAMMA)`.
/// For a fixed master seed the map `replica_id -> stream_id` is injective,
/// so streams never collide. The derivation is stateless: the stream for
/// replica `k` does not depend on any other replica having run.
pub fn seed_stream(master_seed: u64, replica_id: u64) -> SeedSpec {
    let z = master_seed.wrapping_add(replica_id.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
    SeedSpec {
        master_seed,
        stream_id: splitmix64(z),
    }
}

impl SeedSpec {
    /// Instantiate the replica generator. ChaCha8 keyed by the expanded
    /// (master, stream) pair; platform independent by construction.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut z = self.master_seed ^ self.stream_id.rotate_left(17);
        for chunk in key.chunks_exact_mut(8) {
            z = splitmix64(z.wrapping_add(GOLDEN_GAMMA));
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }

    /// Derive a sub-stream, e.g. for a second independent chain inside one
    /// replica. Mixing is the same bijective finalizer, offset by `salt`.
    pub fn substream(&self, salt: u64) -> SeedSpec {
        SeedSpec {
            master_seed: self.master_seed,
            stream_id: splitmix64(self.stream_id ^ salt.wrapping_mul(GOLDEN_GAMMA)),
        }
    }
}
