//! Target-speaker verification toolkit.
//!
//! The crate implements a complete, self-contained pipeline:
//!
//! 1. [`corpus`] — deterministic synthetic two-talker corpus (all-pole toy
//!    speakers) with mixture simulation and trial lists;
//! 2. [`attention`] — the speaker attention (extraction) network: multi-scale
//!    speech encoder, speaker encoder, TCN mask extractor, decoder;
//! 3. [`representation`] — four target-speaker embedding schemes (R/T/F/FA);
//! 4. [`training`] — multi-task losses (reconstruction + dual speaker
//!    classification), Adam, and the 3-stage schedule;
//! 5. [`backend`] — LDA, length normalization, Gaussian PLDA, adaptive
//!    s-norm, EER and minimum-DCF metrics;
//! 6. [`pipeline`] / the `tsvkit` CLI — simulate, train, embed, score, eval.
//!
//! Everything numeric runs on f64 via the in-crate [`autodiff`] tape; runs are
//! bit-deterministic given a seed.

pub mod attention;
pub mod autodiff;
pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod pipeline;
pub mod representation;
pub mod training;

mod error;
pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// RNG derived from a base seed plus a purpose label.
///
/// Every randomized step (corpus synthesis, parameter init, epoch shuffling,
/// segment offsets, ...) draws from its own labeled stream, so adding or
/// reordering one step never perturbs another — the backbone of the crate's
/// bit-reproducibility guarantee.
pub fn derive_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
