//! Hierarchical seed derivation.
//!
//! Every random stream is a ChaCha8 generator keyed by a 64-bit seed derived
//! from the run seed and a path of labels, e.g. `derive(run, &["world", "pool"])`.
//! Adding a new consumer never perturbs the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Child seed for `labels` under `parent`.
pub fn derive(parent: u64, labels: &[&str]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(parent), |acc, l| splitmix64(acc ^ fnv1a(l)))
}

/// Child seed for a numeric index (batch, trial, cell).
pub fn derive_index(parent: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(parent, &[label]) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
