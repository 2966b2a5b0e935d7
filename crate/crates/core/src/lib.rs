//! Benchmark harness for measuring catastrophic forgetting of neural
//! ad-hoc rankers trained over a stream of retrieval datasets.

pub mod autodiff;
pub mod characteristics;
pub mod corpus;
pub mod error;
pub mod index;
pub mod metrics;
pub mod pipeline;
pub mod lifelong;
pub mod rankers;
pub mod training;

pub use error::{Error, Result};

/// Derives an independent sub-seed from `seed` and a stream tag (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
