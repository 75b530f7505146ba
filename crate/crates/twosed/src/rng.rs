//! Counter-keyed random streams.
//!
//! Every random draw in this crate comes from a ChaCha stream whose seed is
//! derived from a master seed plus a fixed tuple of stream tags (theta index,
//! sample index, block index, ...). Streams are therefore independent of
//! scheduling order: parallel and sequential runs produce identical draws.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Domain-separation tags for the keyed streams.
pub mod tag {
    pub const PARAMS: u64 = 0x01;
    pub const NOISE: u64 = 0x02;
    pub const SHUFFLE: u64 = 0x03;
    pub const DATA: u64 = 0x04;
    pub const LABEL: u64 = 0x05;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic generator keyed by `(master_seed, tags)`.
pub fn keyed_rng(master_seed: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut state = master_seed ^ 0x6a09_e667_f3bc_c908;
    let mut fold = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        fold ^= splitmix64(&mut state);
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        state ^= fold;
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}

/// Collapses `(master_seed, tags)` into a single derived seed, for handing
/// independent sub-streams to components that take a plain seed.
pub fn derive_seed(master_seed: u64, tags: &[u64]) -> u64 {
    keyed_rng(master_seed, tags).next_u64()
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn next_f64(rng: &mut ChaCha12Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * next_f64(rng)
}

/// One standard-normal draw (Marsaglia polar method; the paired draw is
/// discarded so the stream position depends only on the number of calls).
pub fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    loop {
        let u = 2.0 * next_f64(rng) - 1.0;
        let v = 2.0 * next_f64(rng) - 1.0;
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}

/// Fills `out` with independent standard-normal draws.
pub fn fill_standard_normal(rng: &mut ChaCha12Rng, out: &mut [f64]) {
    for slot in out.iter_mut() {
        *slot = standard_normal(rng);
    }
}

/// Unbiased-enough bounded integer via 128-bit multiply-shift.
pub fn next_below(rng: &mut ChaCha12Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha12Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = next_below(rng, i + 1);
        items.swap(i, j);
    }
}
