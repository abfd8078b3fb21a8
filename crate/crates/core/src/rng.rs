//! Seeded random streams.
//!
//! Every source of randomness in a run is a ChaCha8 stream derived from the
//! master seed plus a purpose tag and an index, so that streams never overlap
//! and one component's draws cannot shift another's.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Packet arrivals of one VUE-pair (index = pair id).
    Arrivals = 1,
    /// Turn decisions of one VUE-pair (index = pair id).
    Mobility = 6,
    /// Fast fading of one VUE-pair (index = pair id).
    Fading = 7,
    /// Clustering at a given epoch (index = epoch).
    Grouping = 2,
    /// Randomised decisions of a policy (index = 0).
    Policy = 3,
    /// Replay sampling and network initialisation (index = 0 / 1).
    Learner = 4,
    /// Initial placement of a VUE-pair (index = pair id).
    Placement = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Returns an independent stream for `(seed, purpose, index)`.
pub fn derive(seed: u64, purpose: Stream, index: u64) -> SimRng {
    let key = splitmix64(seed ^ splitmix64((purpose as u64) << 56 ^ index));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(purpose as u64);
    rng
}
