//! Hierarchical graph-convolutional variational autoencoder for
//! sequence-of-graphs data such as human motion.
//!
//! The crate is organized around a small reverse-mode autodiff substrate
//! ([`tensor`]) on which everything else is built: an orthonormal DCT codec
//! ([`dct`]), graph-convolutional layers and blocks ([`graph`]), the ladder
//! model itself ([`model`]), a fully-connected VAE baseline ([`baseline`]),
//! ELBO training ([`train`]), occlusion simulation and MAP imputation
//! ([`impute`]), evaluation metrics and plot emitters ([`metrics`]), and
//! dataset ingestion plus a synthetic motion generator ([`data`]).

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dct;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod impute;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

pub use rand_chacha::ChaCha8Rng;

/// The deterministic RNG used throughout: same seed, same stream.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
