//! Seed derivation. Every random stream in a run is derived from the single
//! configured seed plus a namespace tag, so streams never alias each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a seed with a textual tag and a list of integer indices.
pub fn derive_seed(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut s = splitmix64(seed ^ h);
    for &i in indices {
        s = splitmix64(s ^ i.wrapping_mul(0xd6e8_feb8_6659_fd93));
    }
    s
}

pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tag, indices))
}
