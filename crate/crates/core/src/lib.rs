//! Semi-supervised domain adaptation engine for single-channel target
//! recognition imagery.
//!
//! The crate pairs a wavelet sub-band mixing augmentation with progressive
//! per-category augmentation pools, prototype alignment of source
//! instances, and weak/strong consistency training, all running on a small
//! built-in CNN with reverse-mode gradients.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations used by the CLI and tests.

pub mod augment;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod model;
pub mod pool;
pub mod scalar;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use image::GrayImage;
pub use scalar::Scalar;
pub use wavelet::{dwt2, idwt2, mix_high_freq, pwtda_augment, FilterPair, SubBands, WaveletKind};

pub type GrayImage32 = GrayImage<f32>;
pub type GrayImage64 = GrayImage<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type DomainDataset32 = data::DomainDataset<f32>;
pub type DomainDataset64 = data::DomainDataset<f64>;
