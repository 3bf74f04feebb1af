//! Imbalanced unsupervised domain adaptation with accumulative class
//! centroids.
//!
//! A source domain is resampled class-uniformly, per-class centroids of
//! both domains are accumulated batch by batch and aligned, and
//! source/target feature pairs are pulled together or pushed apart
//! according to classifier and nearest-centroid pseudo labels.

pub mod alignment;
pub mod calibration;
pub mod centroids;
pub mod data;
pub mod error;
pub mod eval;
#[cfg(feature = "cli")]
pub mod experiment;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};

/// Mixes a base seed with a stream tag (SplitMix64 finalizer), giving
/// independent RNG streams for data, init and each sampler.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
