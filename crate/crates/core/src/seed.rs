//! Named sub-seeds derived from a single run seed.

/// Stream names used by the training pipeline.
pub const SPLIT: &str = "split";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const SAMPLING: &str = "sampling";
pub const DROPOUT: &str = "dropout";
pub const NEGATIVES: &str = "negatives";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for `stream`, independent across stream names.
pub fn sub_seed(seed: u64, stream: &str) -> u64 {
    // FNV-1a over the stream name
    let tag = stream.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    splitmix64(seed ^ splitmix64(tag))
}

/// Seed for the `index`-th draw of `stream` (e.g. one per epoch).
pub fn indexed_seed(seed: u64, stream: &str, index: u64) -> u64 {
    splitmix64(sub_seed(seed, stream).wrapping_add(index))
}
