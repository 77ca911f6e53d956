//! Training-free data selection from transformer activation dumps.
//!
//! The pipeline reads per-sample activation records ([`dump`]), turns each
//! into an instruction-conditioned representation vector ([`repr`]), finds
//! the dominant singular subspace of the centered representation matrix
//! ([`svd`]) and keeps the samples with the highest leverage on that
//! subspace ([`select`]). [`synth`] and [`bench`] provide synthetic data,
//! oracle checks and timing harnesses.

pub mod bench;
pub mod dump;
pub mod error;
pub mod fsutil;
pub mod repr;
pub mod select;
pub mod svd;
pub mod synth;

pub use error::{Error, Result};
