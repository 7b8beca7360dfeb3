//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Substream names used across the pipeline.
pub mod stream {
    pub const WORLD: &str = "world";
    pub const INIT: &str = "init";
    pub const SAMPLING: &str = "sampling";
    pub const KMEANS: &str = "kmeans";
    pub const EXEMPLAR: &str = "exemplar";
    pub const HEAD: &str = "head";
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent generator for `name` under `root`.
pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(fnv1a(name));
    rng
}

/// Like [`substream`] with an extra index, e.g. one stream per session.
pub fn indexed_substream(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(fnv1a(name));
    rng
}
