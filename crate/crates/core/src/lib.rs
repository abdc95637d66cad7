//! Few-shot network intrusion detection with multi-space prototypical
//! networks.
//!
//! An MLP embeds flow records into R^m. Episodes are classified by distance
//! to class prototypes, where the distance is a convex combination of four
//! per-episode-normalized metrics (Euclidean, cosine, Chebyshev, sliced
//! 1-D Wasserstein over embedding coordinates). Training is episodic with
//! Adam, gradient clipping and an optional Polyak (EMA) average of the
//! weights used for validation and deployment.

pub mod dataio;
pub mod embedder;
pub mod episodic;
mod error;
pub mod evaluator;
pub mod experiment;
pub mod metric_spaces;
pub mod objective;
pub mod prototypes;
pub mod trainer;

pub use error::{Error, Result};

/// Derives an independent stream seed from a base seed. Splitmix64 step;
/// distinct `stream` values give unrelated ChaCha seeds.
pub fn subseed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
