//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a stream addressed by
//! `(seed, domain, index)`. The ChaCha key is derived from the seed and the
//! domain, and the index selects the ChaCha stream, so a sample's draws never
//! depend on how many draws other samples made or on the order in which
//! workers visit them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent purposes that draw randomness from one global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Prototype = 1,
    Feature = 2,
    Noise = 3,
    HeadInit = 4,
    Shuffle = 5,
    TheoryTrial = 6,
    Bootstrap = 7,
    Oracle = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The random stream for one `(seed, domain, index)` triple.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(domain as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}
