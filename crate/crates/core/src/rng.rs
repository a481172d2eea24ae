//! Entity-keyed deterministic randomness.
//!
//! Every stochastic draw in the engine is made from a generator derived from
//! `(global seed, purpose tag, entity keys)`. Draws therefore do not depend on
//! the order in which entities are visited, and pool-wide work can fan out
//! across threads without changing any result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type used throughout the crate.
pub type KeyedRng = ChaCha8Rng;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn absorb(acc: &mut u64, word: u64) {
    let mut s = *acc ^ word;
    *acc = splitmix64(&mut s);
}

/// Build a generator for one `(seed, tag, keys)` triple.
pub fn keyed(seed: u64, tag: &str, keys: &[u64]) -> KeyedRng {
    let mut acc = seed ^ 0x6A09_E667_F3BC_C908;
    absorb(&mut acc, tag.len() as u64);
    for chunk in tag.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        absorb(&mut acc, u64::from_le_bytes(word));
    }
    absorb(&mut acc, keys.len() as u64);
    for &k in keys {
        absorb(&mut acc, k);
    }
    let mut material = [0u8; 32];
    let mut state = acc;
    for chunk in material.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(material)
}
