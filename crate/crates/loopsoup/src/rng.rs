//! Deterministic stream derivation for replica-parallel sampling.
//!
//! Every random draw in the crate comes from a ChaCha8 stream addressed by
//! (master seed, tag path), where the tag path names the consumer: typically
//! [replica, channel, length class]. Streams with distinct tag paths are
//! statistically independent, and because each stream is derived rather than
//! split off sequentially, results never depend on which worker thread
//! consumed which stream or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step: the standard 64-bit finalizer, used here as a stable
/// stream-id hash so seeds are reproducible across platforms and versions.
#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Collapse (master, tags) into a single stable 64-bit sub-seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master ^ 0x6c62_272e_07bb_0142;
    let mut acc = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// The ChaCha8 stream for a given tag path under a master seed.
pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = derive_seed(master, tags);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Channel tags distinguishing the independent random inputs of one replica.
pub mod channel {
    /// Per-length truncated sampling (combined count/root/walk/arrival draws).
    pub const TRUNCATED: u64 = 1;
    /// Per-length window sampling.
    pub const WINDOW: u64 = 2;
    /// Bernoulli edge percolation (calibration model).
    pub const BERNOULLI: u64 = 3;
    /// Threshold probe indexing inside bisection runs.
    pub const PROBE: u64 = 4;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_tag_sensitive() {
        let a: Vec<u64> = stream(7, &[1, 2, 3]).random_iter().take(4).collect();
        let b: Vec<u64> = stream(7, &[1, 2, 3]).random_iter().take(4).collect();
        let c: Vec<u64> = stream(7, &[1, 2, 4]).random_iter().take(4).collect();
        let d: Vec<u64> = stream(8, &[1, 2, 3]).random_iter().take(4).collect();
        assert_eq!(a, b, "same address, same stream");
        assert_ne!(a, c, "tag change must move the stream");
        assert_ne!(a, d, "master change must move the stream");
    }

    #[test]
    fn tag_paths_do_not_collide_on_concatenation() {
        // [1, 23] and [12, 3] style ambiguities must map to different seeds.
        assert_ne!(derive_seed(0, &[1, 23]), derive_seed(0, &[12, 3]));
        assert_ne!(derive_seed(0, &[]), derive_seed(0, &[0]));
        assert_ne!(derive_seed(0, &[0, 1]), derive_seed(0, &[1, 0]));
    }

    #[test]
    fn derived_u64s_look_uniform_in_low_bits() {
        // Cheap sanity check: parity of derived seeds over consecutive tags
        // should not be constant.
        let ones: u32 = (0..64)
            .map(|i| (derive_seed(42, &[i]) & 1) as u32)
            .sum();
        assert!((16..=48).contains(&ones), "parity badly skewed: {ones}/64");
    }
}
