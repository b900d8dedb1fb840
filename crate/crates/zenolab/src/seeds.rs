//! Deterministic seed derivation for parallel Monte Carlo streams.
//!
//! One run seed is expanded into independent streams keyed by a module tag and
//! a chunk index. Samples are drawn in fixed-size chunks, each chunk owning its
//! derived generator, and chunk results are merged in chunk order. The outcome
//! is therefore bit-identical no matter how many threads execute the chunks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed chunk size for parallel sampling.
pub const CHUNK: u64 = 1 << 16;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.as_bytes() {
        h = (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive the stream seed for `(seed, tag, index)`.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(tag)).wrapping_add(splitmix64(index)))
}

/// Generator for one `(tag, index)` stream of a run seed.
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}

/// Split `n` samples into `(chunk_index, chunk_len)` pairs of size [`CHUNK`].
pub fn chunk_layout(n: u64) -> Vec<(u64, u64)> {
    let mut out = Vec::with_capacity(n.div_ceil(CHUNK) as usize);
    let mut start = 0u64;
    let mut index = 0u64;
    while start < n {
        let len = CHUNK.min(n - start);
        out.push((index, len));
        start += len;
        index += 1;
    }
    out
}
