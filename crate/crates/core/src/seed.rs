//! Seed derivation.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] keyed by a
//! 64-bit seed. Independent consumers (initialization of each layer, label
//! flips, SGD iterate selection, verification trials) get their own stream
//! by mixing a label into the parent seed, so that reordering one consumer
//! never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams derived from one global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Sgd,
    Flips,
    Verify,
    Data,
}

impl Stream {
    pub fn label(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::Sgd => "sgd",
            Stream::Flips => "flips",
            Stream::Verify => "verify",
            Stream::Data => "data",
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix an arbitrary label into `seed`.
pub fn derive(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then two rounds of splitmix.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(seed) ^ h)
}

pub fn derive_index(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed).wrapping_add(index.wrapping_mul(0xd1b5_4a32_d192_ed03)))
}

pub fn sub_seed(global: u64, stream: Stream) -> u64 {
    derive(global, stream.label())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for stream `index` of `seed`; streams never overlap.
pub fn rng_stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}
