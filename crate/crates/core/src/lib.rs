//! Frequency-aware GAN machinery on a small reverse-mode tensor engine.
//!
//! * [`tensor`]: rank-4 tensors and the differentiation tape.
//! * [`wavelet`]: Haar wavelet pooling / unpooling.
//! * [`fregan`]: high-frequency discriminator heads, frequency skip
//!   connection, high-frequency alignment and the hinge losses.
//! * [`models`], [`optim`], [`train`], [`checkpoint`]: toy generator and
//!   discriminator, Adam, the alternating training loop and persistence.
//! * [`data`]: synthetic corpora and image-directory ingestion.
//! * [`spectral`]: power spectra, radial profiles and band-energy statistics.
//! * [`verify`]: invariant suites shared by tests and the CLI.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fregan;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod wavelet;

pub use error::{Error, Result};
