//! Deterministic RNG substream derivation.
//!
//! Every random draw in the simulator comes from a ChaCha stream keyed by
//! the master seed, a domain label, and integer indices. Streams for
//! different (domain, indices) pairs are independent, and the derivation is
//! platform-independent, which is what makes replays byte-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a hash of a byte string.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// SplitMix64 step: mixes the state and returns the next output word.
fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha stream from `(master, domain, indices)`.
pub fn substream(master: u64, domain: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut state = master ^ fnv1a(domain.as_bytes());
    let _ = splitmix(&mut state);
    for &ix in indices {
        state ^= ix.wrapping_mul(0xA24B_AED4_963E_E407);
        let _ = splitmix(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
