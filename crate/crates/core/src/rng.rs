//! Named, independent random streams derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Augment,
    Dropout,
    Pool,
    Smoothing,
    Order,
    Scene,
    Raycast,
    Perturb,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Augment => 2,
            Stream::Dropout => 3,
            Stream::Pool => 4,
            Stream::Smoothing => 5,
            Stream::Order => 6,
            Stream::Scene => 7,
            Stream::Raycast => 8,
            Stream::Perturb => 9,
        }
    }
}

/// ChaCha8 keyed by `seed` on the stream's own nonce.
pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Mixes a frame or sample index into a seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
