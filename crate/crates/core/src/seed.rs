//! Seed derivation. Every stochastic component draws from a ChaCha stream
//! keyed by a (base seed, stream tag, index) triple so results do not depend
//! on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and an index into a new seed.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix64(seed);
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ splitmix64(index))
}

pub fn rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}

/// Hex SHA-256 over the little-endian bytes of an id list.
pub fn hash_ids(ids: &[usize]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for &id in ids {
        hasher.update((id as u64).to_le_bytes());
    }
    hex::encode(hasher.finalize())
}
