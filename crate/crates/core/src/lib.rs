//! Stain-aware learned lossy codec for HE histopathology patches.
//!
//! An RGB patch is split into stain concentrations, fused with the colour
//! channels by a small stain encoder, compressed by a factorized-prior
//! autoencoder and range coded into a self-describing container.

pub mod bundle;
pub mod codec;
pub mod coder;
pub mod corpus;
pub mod container;
pub mod entropy;
pub mod data_io;
pub mod downstream;
pub mod error;
pub mod evaluation;
pub mod jpeg;
pub mod metrics;
pub mod models;
pub mod stain;
pub mod training;

pub use error::{BundleError, Error, FormatError, Result};
pub use sqlc_tensor::Tensor;
